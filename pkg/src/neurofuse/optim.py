"""Adamax: Adam with an infinity-norm second moment.

Update per step t (1-based):

    m <- beta1*m + (1-beta1)*g
    u <- max(beta2*u, |g|)
    theta <- theta - (lr / (1 - beta1**t)) * m / (u + eps)

The infinity norm makes the effective step size roughly lr regardless of
gradient scale, which is why the first step moves each weight by about lr.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Tensor


class Adamax:
    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-7,
    ):
        self.params = [p for p in params]
        if not self.params:
            raise ValueError("optimizer received no parameters")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.u = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        correction = 1.0 - self.beta1**self.t
        for p, m, u in zip(self.params, self.m, self.u):
            if not p.requires_grad:
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            np.maximum(self.beta2 * u, np.abs(g), out=u)
            p.data -= (self.lr / correction) * m / (u + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.grad[...] = 0.0
