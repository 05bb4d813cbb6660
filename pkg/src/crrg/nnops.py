"""Dense-layer building blocks over flat float64 parameter vectors.

Every trainable model in this package stores its parameters as one flat
vector plus a ParamLayout describing named slices. Forward passes read
zero-copy views of the vector; backward passes fill a same-length gradient
vector. That makes the optimizer, the checkpoint writer, and the
finite-difference oracle all operate on plain 1-D arrays.
"""
from __future__ import annotations

import numpy as np

from .errors import DimensionError


class ParamLayout:
    """Ordered mapping of parameter names to shapes within a flat vector."""

    def __init__(self, entries: list[tuple[str, tuple[int, ...]]]):
        self.entries = list(entries)
        names = [n for n, _ in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter name in layout")
        self.size = int(sum(int(np.prod(s)) for _, s in self.entries))

    def views(self, vec: np.ndarray) -> dict[str, np.ndarray]:
        """Named views into vec; writes through to the underlying storage."""
        if vec.shape != (self.size,):
            raise DimensionError(f"expected vector of length {self.size}, got {vec.shape}")
        out = {}
        off = 0
        for name, shape in self.entries:
            n = int(np.prod(shape))
            out[name] = vec[off:off + n].reshape(shape)
            off += n
        return out

    def init_vector(self, rng: np.random.Generator, scale_of=None) -> np.ndarray:
        """Uniform init U(-s, s) per tensor.

        scale_of(name, shape) returns s; default is 1/sqrt(fan_in) for
        matrices and 0 for 1-D tensors (biases, norm offsets).
        """
        vec = np.zeros(self.size, dtype=np.float64)
        views = self.views(vec)
        for name, shape in self.entries:
            if scale_of is not None:
                s = scale_of(name, shape)
            elif len(shape) >= 2:
                s = 1.0 / np.sqrt(shape[0])
            else:
                s = 0.0
            if s > 0:
                views[name][...] = rng.uniform(-s, s, size=shape)
        return vec


def affine(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return x @ w + b


def affine_backward(x, w, dy):
    """Returns (dx, dw, db) for y = x @ w + b with x of shape (..., in)."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    db = dy2.sum(axis=0)
    dx = dy @ w.T
    return dx, dw, db


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(x, dy):
    return dy * (x > 0.0)


def sigmoid(z):
    out = np.empty_like(np.asarray(z, dtype=np.float64))
    z = np.asarray(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softplus(z):
    """log(1 + e^z), overflow-safe."""
    z = np.asarray(z, dtype=np.float64)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def softmax(z, axis=-1):
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis=-1):
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalizes the last axis. Returns (y, cache) for the backward pass."""
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def layer_norm_backward(dy, cache):
    xhat, inv, gamma = cache
    dgamma = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    dbeta = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    g = dy * gamma
    n = xhat.shape[-1]
    dx = inv * (g - g.mean(axis=-1, keepdims=True)
                - xhat * (g * xhat).mean(axis=-1, keepdims=True))
    del n
    return dx, dgamma, dbeta


def cross_entropy_logits(logits, targets, mask=None):
    """Mean NLL of targets under row softmax; masked rows excluded.

    logits: (T, V); targets: (T,) int ids; mask: (T,) bool of rows to count.
    Returns (loss, dlogits) with dlogits already scaled for the mean.
    """
    t = np.asarray(targets)
    logp = log_softmax(logits, axis=-1)
    if mask is None:
        mask = np.ones(t.shape[0], dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise DimensionError("no unmasked target positions")
    nll = -logp[np.arange(t.shape[0]), t]
    loss = float(nll[mask].sum() / count)
    dlogits = softmax(logits, axis=-1)
    dlogits[np.arange(t.shape[0]), t] -= 1.0
    dlogits[~mask] = 0.0
    dlogits /= count
    return loss, dlogits
