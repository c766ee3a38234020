"""Plain SGD and Adam over tensors identified by id."""
from __future__ import annotations

import numpy as np

from .errors import NonFiniteError
from .tensor import Tensor


def _check_finite(params, grads):
    report = {}
    for p in params:
        g = grads.get(p.id)
        if g is not None:
            report[p.name or str(p.id)] = float(np.max(np.abs(g.data))) if g.size else 0.0
    bad = [k for k, v in report.items() if not np.isfinite(v)]
    if bad:
        raise NonFiniteError(f"non-finite gradient for {bad[0]}", layer=bad[0], report=report)


class SGD:
    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity: dict[int, np.ndarray] = {}

    def step(self, params: list[Tensor], grads: dict) -> None:
        _check_finite(params, grads)
        for p in params:
            g = grads.get(p.id)
            if g is None:
                continue
            g = g.data
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                v = self._velocity.get(p.id)
                v = g if v is None else self.momentum * v + g
                self._velocity[p.id] = v
                g = v
            p.assign(p.data - self.lr * g)


class Adam:
    """Adam with bias correction."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}

    def step(self, params: list[Tensor], grads: dict) -> None:
        _check_finite(params, grads)
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p in params:
            g = grads.get(p.id)
            if g is None:
                continue
            g = g.data
            m = self.beta1 * self._m.get(p.id, 0.0) + (1 - self.beta1) * g
            v = self.beta2 * self._v.get(p.id, 0.0) + (1 - self.beta2) * g * g
            self._m[p.id], self._v[p.id] = m, v
            p.assign(p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps))


def sgd_step(params, grads, lr):
    SGD(lr).step(params, grads)


def adam_step(params, grads, lr, state: Adam | None = None):
    """One Adam update; pass ``state`` to continue an existing trajectory."""
    opt = state or Adam(lr)
    opt.lr = lr
    opt.step(params, grads)
    return opt
