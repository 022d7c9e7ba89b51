"""Optimizers over named parameter dictionaries.

AdamW (decoupled weight decay) is the default; plain gradient descent is
kept as a fallback whose update has no internal state, which makes bitwise
reproducibility trivial to reason about.
"""

from __future__ import annotations

import numpy as np

__all__ = ["AdamW", "GradientDescent", "make_optimizer"]


def _check_keys(params: dict, grads: dict):
    if set(params) != set(grads):
        missing = set(params) ^ set(grads)
        raise ValueError(f"params/grads key mismatch: {sorted(missing)}")
    for name in params:
        if params[name].shape != grads[name].shape:
            raise ValueError(
                f"shape mismatch for {name!r}: "
                f"{params[name].shape} vs {grads[name].shape}"
            )


def _check_hyper(lr: float, weight_decay: float):
    if lr <= 0.0:
        raise ValueError(f"lr must be > 0, got {lr}")
    if weight_decay < 0.0:
        raise ValueError(f"weight_decay must be >= 0, got {weight_decay}")


class GradientDescent:
    """Fallback mode: p <- p - lr*g, with optional decoupled weight decay."""

    def __init__(self, lr: float, weight_decay: float = 0.0):
        _check_hyper(lr, weight_decay)
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        _check_keys(params, grads)
        out = {}
        for name, p in params.items():
            new = p - self.lr * grads[name]
            if self.weight_decay:
                new = new - self.lr * self.weight_decay * p
            out[name] = new
        return out


class AdamW:
    """Adam with bias-corrected moments and decoupled weight decay."""

    def __init__(
        self,
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        _check_hyper(lr, weight_decay)
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise ValueError(f"betas must lie in [0, 1), got {betas}")
        if eps <= 0.0:
            raise ValueError(f"eps must be > 0, got {eps}")
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        _check_keys(params, grads)
        b1, b2 = self.betas
        self.t += 1
        out = {}
        for name, p in params.items():
            g = grads[name]
            m = self._m.get(name)
            v = self._v.get(name)
            if m is None:
                m = np.zeros_like(p)
                v = np.zeros_like(p)
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            self._m[name] = m
            self._v[name] = v
            m_hat = m / (1.0 - b1**self.t)
            v_hat = v / (1.0 - b2**self.t)
            new = p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay:
                new = new - self.lr * self.weight_decay * p
            out[name] = new
        return out


def make_optimizer(mode: str, lr: float, weight_decay: float = 0.0):
    if mode == "adamw":
        return AdamW(lr, weight_decay=weight_decay)
    if mode == "sgd":
        return GradientDescent(lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer mode {mode!r}, expected 'adamw' or 'sgd'")
