"""Region-selection binary classifier: a 1024-512-128-1 ReLU MLP trained
with weighted binary cross-entropy (pos_weight on the positive term) to
decide which detected regions get a generated sentence.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nnops
from .errors import DimensionError, InputError
from .optim import AdamWConfig, AdamWState, PlateauScheduler, adamw_step, plateau_step

SELECTOR_LAYOUT = nnops.ParamLayout([
    ("selector.layer1.weight", (1024, 512)),
    ("selector.layer1.bias", (512,)),
    ("selector.layer2.weight", (512, 128)),
    ("selector.layer2.bias", (128,)),
    ("selector.layer3.weight", (128, 1)),
    ("selector.layer3.bias", (1,)),
])


@dataclass
class BCEConfig:
    pos_weight: float = 1.0

    def __post_init__(self):
        if not self.pos_weight > 0:
            raise InputError("pos_weight must be positive")


@dataclass
class SelectorMLP:
    params: np.ndarray = field(default_factory=lambda: np.zeros(SELECTOR_LAYOUT.size))

    @classmethod
    def init(cls, seed: int) -> "SelectorMLP":
        # uniform +-1/sqrt(fan_in) for weights, zero biases
        rng = np.random.default_rng(seed)
        return cls(SELECTOR_LAYOUT.init_vector(rng))

    def views(self):
        return SELECTOR_LAYOUT.views(self.params)


def _forward_batch(params: np.ndarray, x: np.ndarray):
    v = SELECTOR_LAYOUT.views(params)
    z1 = nnops.affine(x, v["selector.layer1.weight"], v["selector.layer1.bias"])
    h1 = nnops.relu(z1)
    z2 = nnops.affine(h1, v["selector.layer2.weight"], v["selector.layer2.bias"])
    h2 = nnops.relu(z2)
    logits = nnops.affine(h2, v["selector.layer3.weight"], v["selector.layer3.bias"])
    return logits.ravel(), (x, z1, h1, z2, h2)


def selector_forward(features: np.ndarray, model: SelectorMLP) -> float:
    """Logit for a single 1024-dim region feature."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape != (1024,):
        raise DimensionError(f"selector expects 1024 features, got {features.shape}")
    logits, _ = _forward_batch(model.params, features[None, :])
    return float(logits[0])


def bce_with_logits(logit: float, label: int, cfg: BCEConfig) -> tuple[float, float]:
    """Weighted BCE in the stable softplus form; returns (loss, dloss/dlogit)."""
    if label not in (0, 1):
        raise InputError("label must be 0 or 1")
    z = float(logit)
    pw = cfg.pos_weight
    loss = pw * label * float(nnops.softplus(-z)) + (1 - label) * float(nnops.softplus(z))
    sig = float(nnops.sigmoid(z))
    grad = pw * label * (sig - 1.0) + (1 - label) * sig
    return loss, grad


def selector_loss_and_grad(params: np.ndarray, x: np.ndarray, y: np.ndarray,
                           cfg: BCEConfig):
    """Mean weighted BCE over a batch plus the full parameter gradient."""
    logits, cache = _forward_batch(params, x)
    pw = cfg.pos_weight
    losses = pw * y * nnops.softplus(-logits) + (1 - y) * nnops.softplus(logits)
    loss = float(losses.mean())
    sig = nnops.sigmoid(logits)
    dlogits = (pw * y * (sig - 1.0) + (1 - y) * sig) / y.shape[0]
    xb, z1, h1, z2, h2 = cache
    v = SELECTOR_LAYOUT.views(params)
    grads = np.zeros_like(params)
    g = SELECTOR_LAYOUT.views(grads)
    dh2, dw3, db3 = nnops.affine_backward(h2, v["selector.layer3.weight"], dlogits[:, None])
    g["selector.layer3.weight"][...] = dw3
    g["selector.layer3.bias"][...] = db3
    dz2 = nnops.relu_backward(z2, dh2)
    dh1, dw2, db2 = nnops.affine_backward(h1, v["selector.layer2.weight"], dz2)
    g["selector.layer2.weight"][...] = dw2
    g["selector.layer2.bias"][...] = db2
    dz1 = nnops.relu_backward(z1, dh1)
    _, dw1, db1 = nnops.affine_backward(xb, v["selector.layer1.weight"], dz1)
    g["selector.layer1.weight"][...] = dw1
    g["selector.layer1.bias"][...] = db1
    return loss, grads


@dataclass
class SelectorTrainConfig:
    epochs: int = 10
    batch_size: int = 16
    learn_rate: float = 5e-5
    weight_decay: float = 0.0
    pos_weight: float = 2.0
    factor: float = 0.5
    cooldown: int = 5
    patience: int = 5
    val_fraction: float = 0.15
    seed: int = 0


def train_selector(dataset: list[tuple[np.ndarray, int]],
                   cfg: SelectorTrainConfig) -> tuple[SelectorMLP, list[dict]]:
    """Mini-batch training; keeps the best-validation-loss parameters.

    Deterministic for a fixed seed. Returns (model, per-epoch history).
    """
    if not dataset:
        raise InputError("empty selector dataset")
    x = np.stack([np.asarray(f, dtype=np.float64) for f, _ in dataset])
    y = np.array([int(l) for _, l in dataset], dtype=np.float64)
    if x.shape[1] != 1024:
        raise DimensionError("selector features must be 1024-dim")
    if not set(np.unique(y)) <= {0.0, 1.0}:
        raise InputError("labels must be binary")
    rng = np.random.default_rng(cfg.seed)
    model = SelectorMLP.init(cfg.seed)
    n = x.shape[0]
    n_val = int(round(n * cfg.val_fraction))
    perm = rng.permutation(n)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if train_idx.size == 0:
        train_idx = perm
    bce = BCEConfig(cfg.pos_weight)
    opt_cfg = AdamWConfig(cfg.learn_rate, cfg.weight_decay)
    state = AdamWState.zeros(model.params.size)
    sched = PlateauScheduler(cfg.factor, cfg.patience, cfg.cooldown, cfg.learn_rate)
    best = (math.inf, model.params.copy())
    history = []
    lr = cfg.learn_rate
    for epoch in range(cfg.epochs):
        order = rng.permutation(train_idx)
        total = 0.0
        for start in range(0, order.size, cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            loss, grads = selector_loss_and_grad(model.params, x[b], y[b], bce)
            model.params, state = adamw_step(model.params, grads, state, opt_cfg, lr=lr)
            total += loss * b.size
        train_loss = total / order.size
        if val_idx.size:
            val_loss, _ = selector_loss_and_grad(model.params, x[val_idx], y[val_idx], bce)
        else:
            val_loss = train_loss
        if val_loss < best[0]:
            best = (val_loss, model.params.copy())
        lr = plateau_step(sched, val_loss, mode="min")
        history.append({"epoch": epoch, "lr": lr, "train_loss": train_loss,
                        "val_loss": val_loss})
    model.params = best[1]
    return model, history


def select_regions(model: SelectorMLP, features: list[np.ndarray]) -> list[bool]:
    """Decision rule: a region is selected when its logit is positive."""
    return [selector_forward(f, model) > 0.0 for f in features]
