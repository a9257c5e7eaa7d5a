"""Gradient-step rules over named parameter dicts.

Parameters live in ``dict[str, Tensor]``; state is keyed by name and
updates iterate in sorted-name order so runs are deterministic.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .autodiff import Tensor

__all__ = ["Sgd", "RmsProp", "Adam", "zero_grads", "clip_grad_norm"]


def zero_grads(params: Mapping[str, Tensor]) -> None:
    for name in params:
        params[name].grad = None


def clip_grad_norm(params: Mapping[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = 0.0
    for name in sorted(params):
        g = params[name].grad
        if g is not None:
            total += float((g * g).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for name in sorted(params):
            g = params[name].grad
            if g is not None:
                g *= scale
    return norm


class Sgd:
    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._velocity: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, Tensor]) -> None:
        for name in sorted(params):
            p = params[name]
            if p.grad is None:
                continue
            if self.momentum > 0.0:
                v = self._velocity.get(name)
                if v is None:
                    v = np.zeros_like(p.data)
                v = self.momentum * v + p.grad
                self._velocity[name] = v
                p.data -= self.lr * v
            else:
                p.data -= self.lr * p.grad


class RmsProp:
    """Momentum-free adaptive step: second-moment scaling only.

    v <- beta v + (1 - beta) g^2 ;  theta <- theta - lr g / (sqrt(v) + eps)
    """

    def __init__(self, lr: float, beta: float = 0.99, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta = float(beta)
        self.eps = float(eps)
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, Tensor]) -> None:
        for name in sorted(params):
            p = params[name]
            if p.grad is None:
                continue
            v = self._v.get(name)
            if v is None:
                v = np.zeros_like(p.data)
            v = self.beta * v + (1.0 - self.beta) * p.grad**2
            self._v[name] = v
            p.data -= self.lr * p.grad / (np.sqrt(v) + self.eps)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def step(self, params: Mapping[str, Tensor]) -> None:
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        for name in sorted(params):
            p = params[name]
            if p.grad is None:
                continue
            m = self._m.get(name)
            v = self._v.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = b1 * m + (1.0 - b1) * p.grad
            v = b2 * v + (1.0 - b2) * p.grad**2
            self._m[name] = m
            self._v[name] = v
            m_hat = m / (1.0 - b1**self._t)
            v_hat = v / (1.0 - b2**self._t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
