"""Decoupled weight-decay Adam over named parameter groups."""

from __future__ import annotations

import numpy as np

from .errors import TrainingDivergedError
from .tensor import Tensor

MODEL_LR = 5e-4
ROUTER_LR = 5e-3


class AdamW:
    """AdamW with bias-corrected moments and decoupled weight decay.

    Parameters are a name -> Tensor mapping; update order follows insertion
    order, so identical configs step deterministically. Parameters whose
    grad buffer is None are skipped entirely (no decay either).
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = MODEL_LR,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise TrainingDivergedError(name)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= self.lr * (update + self.weight_decay * p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
