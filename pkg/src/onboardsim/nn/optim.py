"""Adaptive-moment optimizer for the user-model training loops."""

from __future__ import annotations

import numpy as np

from .params import ParamStore


class TrainingDiverged(RuntimeError):
    """A gradient or loss became non-finite during training."""


class Adam:
    """Adam with bias correction; deterministic given the gradient stream."""

    def __init__(self, store: ParamStore, lr=1e-2, beta1=0.9, beta2=0.999,
                 eps=1e-8, weight_decay=0.0):
        self.store = store
        self.lr, self.beta1, self.beta2 = lr, beta1, beta2
        self.eps, self.weight_decay = eps, weight_decay
        self.t = 0
        self._m = {n: np.zeros_like(t.data) for n, t in store.trainable()}
        self._v = {n: np.zeros_like(t.data) for n, t in store.trainable()}

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, tensor in self.store.trainable():
            g = tensor.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged(f"non-finite gradient in {name!r} at step {self.t}")
            if self.weight_decay:
                g = g + self.weight_decay * tensor.data
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            tensor.data = tensor.data - self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def zero_grad(self) -> None:
        self.store.zero_grad()
