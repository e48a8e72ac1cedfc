"""Adam with bias correction, over named parameter sets."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Adam:
    """Tracks first/second moments per parameter; ``step`` consumes and zeroes
    the gradients of the parameters it owns."""

    def __init__(self, params: dict[str, Tensor], lr: float = 0.0002,
                 beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        for name, p in self.params.items():
            if p.grad is None:
                raise ValueError(f"adam step: parameter '{name}' has no gradient")
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            p.grad = None

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
