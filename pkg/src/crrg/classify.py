"""Downstream linear classifier over 224-dim embeddings, with AUC and
accuracy evaluation. The classifier is plain logistic regression trained
with the shared optimizer; AUC is the Mann-Whitney statistic computed by
average ranks (ties counted half).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nnops
from .errors import DimensionError, InputError, MetricUndefinedError
from .optim import (AdamWConfig, AdamWState, WarmupSchedule, adamw_step,
                    warmup_lr)

EMBED_DIM = 224

CLASSIFIER_LAYOUT = nnops.ParamLayout([
    ("cls.weight", (EMBED_DIM,)),
    ("cls.bias", (1,)),
])


@dataclass
class LinearClassifier:
    params: np.ndarray = field(default_factory=lambda: np.zeros(CLASSIFIER_LAYOUT.size))

    @property
    def weights(self) -> np.ndarray:
        return CLASSIFIER_LAYOUT.views(self.params)["cls.weight"]

    @property
    def bias(self) -> float:
        return float(CLASSIFIER_LAYOUT.views(self.params)["cls.bias"][0])


def predict_prob(x: np.ndarray, model: LinearClassifier) -> float:
    """Sigmoid of the linear logit."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (EMBED_DIM,):
        raise DimensionError(f"classifier expects {EMBED_DIM} dims, got {x.shape}")
    return float(nnops.sigmoid(float(x @ model.weights) + model.bias))


def _logistic_loss_and_grad(params: np.ndarray, x: np.ndarray, y: np.ndarray):
    v = CLASSIFIER_LAYOUT.views(params)
    z = x @ v["cls.weight"] + v["cls.bias"][0]
    loss = float(np.mean(y * nnops.softplus(-z) + (1 - y) * nnops.softplus(z)))
    dz = (nnops.sigmoid(z) - y) / y.shape[0]
    grads = np.zeros_like(params)
    g = CLASSIFIER_LAYOUT.views(grads)
    g["cls.weight"][...] = x.T @ dz
    g["cls.bias"][...] = dz.sum()
    return loss, grads


@dataclass
class ClassifierTrainConfig:
    epochs: int = 5
    batch_size: int = 32
    learn_rate: float = 5e-5
    weight_decay: float = 1e-4
    warmup_epochs: int = 1
    seed: int = 0


def train_classifier(embeddings: list[np.ndarray] | np.ndarray,
                     labels: list[int] | np.ndarray,
                     cfg: ClassifierTrainConfig) -> tuple[LinearClassifier, list[dict]]:
    """Logistic regression on frozen embeddings; zero init, warmup schedule."""
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != EMBED_DIM:
        raise DimensionError(f"embeddings must be (n, {EMBED_DIM})")
    if x.shape[0] == 0:
        raise InputError("empty training set")
    if len(np.unique(y)) < 2:
        raise InputError("training labels contain a single class")
    rng = np.random.default_rng(cfg.seed)
    model = LinearClassifier()
    opt_cfg = AdamWConfig(cfg.learn_rate, cfg.weight_decay)
    state = AdamWState.zeros(model.params.size)
    sched = WarmupSchedule(cfg.warmup_epochs, cfg.epochs, cfg.learn_rate)
    history = []
    for epoch in range(cfg.epochs):
        lr = warmup_lr(sched, epoch)
        order = rng.permutation(x.shape[0])
        total = 0.0
        for start in range(0, order.size, cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            loss, grads = _logistic_loss_and_grad(model.params, x[b], y[b])
            model.params, state = adamw_step(model.params, grads, state, opt_cfg, lr=lr)
            total += loss * b.size
        history.append({"epoch": epoch, "lr": lr, "train_loss": total / order.size})
    return model, history


def auc(scores, labels) -> float:
    """Mann-Whitney AUC via average ranks; ties count half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUC needs both classes present")
    order = np.argsort(s, kind="stable")
    ranks = np.empty(s.shape[0], dtype=np.float64)
    i = 0
    while i < s.shape[0]:
        j = i
        while j + 1 < s.shape[0] and s[order[j + 1]] == s[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0  # average 1-based rank
        i = j + 1
    pos_rank_sum = float(ranks[y == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    """Fraction of samples where (score >= threshold) equals the label."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape[0] == 0:
        raise InputError("empty score list")
    pred = (s >= threshold).astype(int)
    return float((pred == y).mean())
