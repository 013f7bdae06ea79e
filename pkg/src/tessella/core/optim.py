"""First-order optimizers operating in place on a ParamSet."""

from __future__ import annotations

import numpy as np

from .params import ParamSet


class Adam:
    """Adam with bias correction and optional L2 weight decay added to the gradient."""

    def __init__(self, params: ParamSet, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        if lr < 0 or not (0 <= betas[0] < 1 and 0 <= betas[1] < 1) or eps <= 0:
            raise ValueError("invalid Adam hyper-parameters")
        self.params = params
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.trainable().items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.trainable().items()}

    def step(self, grads: dict | None = None) -> None:
        b1, b2 = self.betas
        self.t += 1
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p in self.params.trainable().items():
            g = p.grad if grads is None else grads.get(name)
            if g is None:
                continue
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)
