"""Layers with hand-written gradients, the momentum optimizer and a gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

from .pccore import IGNORE_LABEL


class Parameter:
    """A learnable tensor with its gradient and momentum buffer."""

    def __init__(self, name: str, value):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.momentum_buffer = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class ParameterStore:
    """Ordered collection of named parameters."""

    def __init__(self):
        self._params: Dict[str, Parameter] = {}

    def add(self, name: str, value) -> Parameter:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        p = Parameter(name, value)
        self._params[name] = p
        return p

    def __getitem__(self, name) -> Parameter:
        return self._params[name]

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def zero_grad(self):
        for p in self:
            p.zero_grad()

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((p.grad**2).sum()) for p in self)))


# ----------------------------------------------------------------------------
# Unary (pointwise linear) map
# ----------------------------------------------------------------------------


def unary_forward(x, W, b):
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ValueError(f"shape mismatch: x {x.shape}, W {W.shape}, b {b.shape}")
    return x @ W + b


def unary_backward(x, W, grad_out):
    return grad_out @ W.T, x.T @ grad_out, grad_out.sum(axis=0)


# ----------------------------------------------------------------------------
# Leaky ReLU
# ----------------------------------------------------------------------------


def leaky_relu(x, slope: float = 0.1):
    return np.where(x >= 0, x, slope * x)


def leaky_relu_backward(x, grad_out, slope: float = 0.1):
    return np.where(x >= 0, grad_out, slope * grad_out)


# ----------------------------------------------------------------------------
# Batch normalization over points
# ----------------------------------------------------------------------------


@dataclass
class BNState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.98
    epsilon: float = 1e-6
    mode: str = "train"

    @classmethod
    def create(cls, channels: int, **kw) -> "BNState":
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels), **kw)


def batch_norm(x, s: BNState, update_stats: bool = True):
    """Per-channel standardization over all points. Returns (out, cache).

    In train mode the running statistics move towards the batch statistics:
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    if s.mode == "train":
        n = x.shape[0]
        if n < 2:
            raise ValueError(f"batch norm in train mode needs at least 2 points, got {n}")
        mean = x.mean(axis=0)
        centered = x - mean
        var = (centered**2).mean(axis=0)
        if update_stats:
            s.running_mean = s.momentum * s.running_mean + (1.0 - s.momentum) * mean
            s.running_var = s.momentum * s.running_var + (1.0 - s.momentum) * var * n / (n - 1)
    elif s.mode == "eval":
        centered = x - s.running_mean
        var = s.running_var
    else:
        raise ValueError(f"unknown batch norm mode {s.mode!r}")
    inv_std = 1.0 / np.sqrt(var + s.epsilon)
    xhat = centered * inv_std
    return xhat * s.gamma + s.beta, (xhat, inv_std, s.mode)


def batch_norm_backward(grad_out, gamma, cache):
    """Returns (grad_x, grad_gamma, grad_beta)."""
    xhat, inv_std, mode = cache
    grad_gamma = (grad_out * xhat).sum(axis=0)
    grad_beta = grad_out.sum(axis=0)
    gx = grad_out * gamma
    if mode == "eval":
        return gx * inv_std, grad_gamma, grad_beta
    grad_x = inv_std * (gx - gx.mean(axis=0) - xhat * (gx * xhat).mean(axis=0))
    return grad_x, grad_gamma, grad_beta


# ----------------------------------------------------------------------------
# Loss
# ----------------------------------------------------------------------------


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits, labels, ignore: int = IGNORE_LABEL, class_weights=None):
    """Mean cross-entropy over labeled points and its gradient w.r.t. the logits.

    With ``class_weights`` the mean becomes a weighted mean.
    """
    labels = np.asarray(labels).astype(np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    mask = labels != ignore
    if not mask.any():
        raise ValueError("every point is ignored; loss is empty")
    if np.any(labels[mask] >= c) or np.any(labels[mask] < 0):
        raise ValueError("label out of range")
    lsm = log_softmax(logits)
    rows = np.flatnonzero(mask)
    lab = labels[rows]
    w = np.ones(len(rows)) if class_weights is None else np.asarray(class_weights, dtype=np.float64)[lab]
    total = w.sum()
    loss = float(-(w * lsm[rows, lab]).sum() / total)
    grad = np.zeros_like(logits)
    p = np.exp(lsm[rows])
    p[np.arange(len(rows)), lab] -= 1.0
    grad[rows] = p * (w / total)[:, None]
    return loss, grad


# ----------------------------------------------------------------------------
# Optimizer
# ----------------------------------------------------------------------------


def momentum_step(params: ParameterStore, lr: float = 0.01, momentum: float = 0.98,
                  clip_norm: Optional[float] = None):
    """v <- momentum * v + grad; value <- value - lr * v; then zero the gradients."""
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {p.name!r}")
    scale = 1.0
    if clip_norm is not None:
        norm = params.grad_norm()
        if norm > clip_norm:
            scale = clip_norm / norm
    for p in params:
        g = p.grad if scale == 1.0 else p.grad * scale
        p.momentum_buffer *= momentum
        p.momentum_buffer += g
        p.value -= lr * p.momentum_buffer
        p.zero_grad()


# ----------------------------------------------------------------------------
# Finite differences
# ----------------------------------------------------------------------------


def relative_error(analytic, numeric) -> float:
    """max|a - n| / max(max|a|, max|n|) for one tensor, 0 when both vanish."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def numeric_gradient(f: Callable[[], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. every entry of ``x`` (mutated in place)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def finite_diff_check(forward: Callable[[], np.ndarray], backward: Callable[[np.ndarray], Dict[str, np.ndarray]],
                      tensors: Dict[str, np.ndarray], eps: float = 1e-6, seed: int = 0,
                      per_tensor: bool = False):
    """Compare analytic gradients against central differences.

    ``forward()`` reads the arrays in ``tensors`` (perturbed in place) and
    returns an array; the checked scalar is ``sum(forward() * G)`` for a fixed
    random ``G``. ``backward(G)`` returns analytic gradients keyed like
    ``tensors``. Returns the max relative error (or the per-tensor dict).
    """
    out = np.asarray(forward(), dtype=np.float64)
    G = np.random.default_rng(seed).normal(size=out.shape)
    analytic = backward(G)

    def scalar():
        return float((np.asarray(forward()) * G).sum())

    errors = {}
    for name, x in tensors.items():
        errors[name] = relative_error(analytic[name], numeric_gradient(scalar, x, eps))
    if per_tensor:
        return errors
    return max(errors.values(), default=0.0)
