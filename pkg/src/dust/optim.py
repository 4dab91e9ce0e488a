"""SGD with momentum and L2 weight decay."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .autodiff import Tensor


class SGD:
    """Momentum SGD: ``v <- m*v + (g + wd*p)``, ``p <- p - lr*v``.

    Gradients are zeroed after every step.
    """

    def __init__(self, params: Mapping[str, Tensor], learning_rate: float = 0.01,
                 momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = dict(params)
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        missing = [k for k, p in self.params.items() if p.grad is None]
        if missing:
            raise RuntimeError(f"sgd_step: no gradient for parameter(s) {missing[:5]}")
        dt = next(iter(self.params.values())).dtype.type if self.params else np.float32
        lr, m, wd = dt(self.learning_rate), dt(self.momentum), dt(self.weight_decay)
        for k, p in self.params.items():
            v = self.velocity[k]
            v *= m
            v += p.grad + wd * p.data
            p.data -= lr * v
            p.grad[...] = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            if p.grad is not None:
                p.grad[...] = 0
