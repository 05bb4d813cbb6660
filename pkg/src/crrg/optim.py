"""Shared training machinery: AdamW, LR schedules, finite-difference oracle.

All state is explicit and the update functions are pure given that state,
so training loops stay deterministic and trivially checkpointable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InputError, OracleError


@dataclass
class AdamWConfig:
    learn_rate: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learn_rate > 0:
            raise InputError("learn_rate must be positive")
        if self.weight_decay < 0:
            raise InputError("weight_decay must be nonnegative")
        if not (0.0 < self.beta1 < self.beta2 < 1.0):
            raise InputError("betas must satisfy 0 < beta1 < beta2 < 1")
        if not self.epsilon > 0:
            raise InputError("epsilon must be positive")


@dataclass
class AdamWState:
    """Exponential moment buffers plus the step counter."""
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamWState":
        return cls(m=np.zeros(n), v=np.zeros(n), t=0)


def adamw_step(params: np.ndarray, grads: np.ndarray, state: AdamWState,
               config: AdamWConfig, lr: float | None = None):
    """One decoupled-weight-decay Adam step; returns (new_params, state).

    Weight decay multiplies params by (1 - lr*wd) before the adaptive
    update. lr overrides config.learn_rate when a schedule drives it.
    """
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise DimensionError("params, grads and moments must share one length")
    step_lr = config.learn_rate if lr is None else lr
    state.t += 1
    state.m = config.beta1 * state.m + (1.0 - config.beta1) * grads
    state.v = config.beta2 * state.v + (1.0 - config.beta2) * grads * grads
    mhat = state.m / (1.0 - config.beta1 ** state.t)
    vhat = state.v / (1.0 - config.beta2 ** state.t)
    out = params * (1.0 - step_lr * config.weight_decay)
    out = out - step_lr * mhat / (np.sqrt(vhat) + config.epsilon)
    return out, state


@dataclass
class PlateauScheduler:
    """Reduce-on-plateau controller over a scalar epoch metric.

    During cooldown the bad-epoch counter is frozen; best-metric updates
    still happen. current_lr only ever shrinks, by multiplication with
    factor.
    """
    factor: float
    patience: int
    cooldown: int
    current_lr: float
    best_metric: float = math.inf
    bad_epochs: int = 0
    cooldown_remaining: int = 0
    reductions: int = 0

    def __post_init__(self):
        if not (0.0 < self.factor < 1.0):
            raise InputError("factor must lie in (0,1)")
        if self.patience < 0 or self.cooldown < 0:
            raise InputError("patience and cooldown must be nonnegative")
        if not self.current_lr > 0:
            raise InputError("current_lr must be positive")


def plateau_step(sched: PlateauScheduler, epoch_metric: float, mode: str = "min") -> float:
    """Feed one epoch's metric; returns the (possibly reduced) lr."""
    if not math.isfinite(epoch_metric):
        raise InputError("epoch metric must be finite")
    if mode not in ("min", "max"):
        raise InputError("mode must be 'min' or 'max'")
    if sched.best_metric == math.inf and mode == "max":
        sched.best_metric = -math.inf
    improved = (epoch_metric < sched.best_metric) if mode == "min" else (epoch_metric > sched.best_metric)
    if improved:
        sched.best_metric = epoch_metric
        sched.bad_epochs = 0
    if sched.cooldown_remaining > 0:
        sched.cooldown_remaining -= 1
        sched.bad_epochs = 0
        return sched.current_lr
    if not improved:
        sched.bad_epochs += 1
        if sched.bad_epochs > sched.patience:
            sched.current_lr *= sched.factor
            sched.reductions += 1
            sched.cooldown_remaining = sched.cooldown
            sched.bad_epochs = 0
    return sched.current_lr


@dataclass
class WarmupSchedule:
    warmup_epochs: int
    total_epochs: int
    base_lr: float

    def __post_init__(self):
        if self.warmup_epochs < 0:
            raise InputError("warmup_epochs must be nonnegative")
        if self.total_epochs <= 0:
            raise InputError("total_epochs must be positive")
        if not self.base_lr > 0:
            raise InputError("base_lr must be positive")


def warmup_lr(schedule: WarmupSchedule, epoch: int) -> float:
    """Linear ramp to base_lr over warmup_epochs, constant afterwards."""
    if epoch < 0 or epoch >= schedule.total_epochs:
        raise InputError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    if epoch < schedule.warmup_epochs:
        return schedule.base_lr * (epoch + 1) / (schedule.warmup_epochs + 1)
    return schedule.base_lr


def finite_diff_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f at x, one coordinate at a time."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xp[i] += eps
        fp = f(xp)
        xm = x.copy()
        xm[i] -= eps
        fm = f(xm)
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise OracleError(f"non-finite function value near coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad


def gradcheck(f, x: np.ndarray, analytic: np.ndarray, n_coords: int | None = None,
              seed: int = 0, eps: float = 1e-5, rel_tol: float = 1e-4,
              abs_tol: float = 1e-8) -> float:
    """Compares analytic to central differences on sampled coordinates.

    Returns the worst relative error seen; raises AssertionError past
    tolerance. n_coords=None checks every coordinate.
    """
    x = np.asarray(x, dtype=np.float64)
    if analytic.shape != x.shape:
        raise DimensionError("analytic gradient shape mismatch")
    if n_coords is None or n_coords >= x.size:
        coords = np.arange(x.size)
    else:
        coords = np.random.default_rng(seed).choice(x.size, size=n_coords, replace=False)
    worst = 0.0
    for i in coords:
        xp = x.copy()
        xp[i] += eps
        xm = x.copy()
        xm[i] -= eps
        fd = (f(xp) - f(xm)) / (2.0 * eps)
        err = abs(analytic[i] - fd)
        denom = max(abs(analytic[i]), abs(fd))
        rel = err / denom if denom > 0 else 0.0
        if err > abs_tol and rel > rel_tol:
            raise AssertionError(
                f"gradient mismatch at coord {i}: analytic {analytic[i]:.10g} vs fd {fd:.10g}")
        if denom > 0:
            worst = max(worst, rel)
    return worst
