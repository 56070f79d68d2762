"""ADAM with an exponentially decaying per-epoch learning rate."""

from __future__ import annotations

import numpy as np

from . import kernels


def learning_rate(lr0: float, decay: float, epoch: int) -> float:
    """Learning rate used throughout epoch ``epoch`` (0-based): ``lr0 * decay**epoch``."""
    return lr0 * decay**epoch


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, weights: dict, grads: dict, lr: float) -> None:
        """Update ``weights`` in place for every name present in ``grads``."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for name, g in grads.items():
            w = weights[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(w)
                self.v[name] = np.zeros_like(w)
            kernels.adam_update(
                w.reshape(-1), np.ascontiguousarray(g, dtype=w.dtype).reshape(-1),
                m.reshape(-1), self.v[name].reshape(-1), lr / c1, b1, b2, c2, self.eps,
            )
