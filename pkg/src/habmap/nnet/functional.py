"""Softmax, cross-entropy and Adam."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NumericalError(FloatingPointError):
    pass


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if np.isnan(z).any():
        raise NumericalError("NaN in logits")
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def as_target_matrix(targets, n_classes: int) -> np.ndarray:
    """Hard class indices or soft rows -> (B, K) distributions."""
    t = np.asarray(targets)
    if t.ndim == 1:
        out = np.zeros((len(t), n_classes))
        out[np.arange(len(t)), t.astype(np.int64)] = 1.0
        return out
    t = t.astype(np.float64)
    if t.shape[1] != n_classes:
        raise ValueError(f"soft targets have {t.shape[1]} columns, expected {n_classes}")
    if (t < -1e-9).any() or not np.allclose(t.sum(axis=1), 1.0, atol=1e-5):
        raise ValueError("soft targets must be nonnegative rows summing to 1")
    return t


def cross_entropy(logits, targets) -> float:
    """Mean over the batch of -sum(target * log softmax(logits))."""
    logits = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets)
    if logits.ndim == 1:
        logits = logits[None]
        t = t[None] if t.ndim == 1 else t.reshape(1)
    T = as_target_matrix(t, logits.shape[1])
    return float(-(T * log_softmax(logits)).sum(axis=1).mean())


def cross_entropy_grad(logits, targets):
    """Loss and its gradient w.r.t. the logits (mean over the batch)."""
    logits = np.asarray(logits, dtype=np.float64)
    T = as_target_matrix(targets, logits.shape[1])
    ls = log_softmax(logits)
    loss = float(-(T * ls).sum(axis=1).mean())
    grad = (np.exp(ls) - T) / len(logits)
    return loss, grad


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place on ``params``."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
