"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

import numpy as np

from .params import ParamStore


def grad_check(store: ParamStore, loss_fn, epsilon: float = 1e-5,
               rel_floor: float = 1e-3) -> float:
    """Compare analytic gradients of `loss_fn()` to central differences.

    `loss_fn` must be a deterministic scalar function of the store's
    trainable tensors (a closure re-running the forward pass). Returns
    the maximum relative error over every parameter entry; the caller
    decides what to do with it. `rel_floor` keeps the denominator away
    from zero so that sub-1e-7 absolute noise on near-zero gradients
    does not register as error.
    """
    store.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {
        name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
        for name, t in store.trainable()
    }

    worst = 0.0
    for name, tensor in store.trainable():
        flat = tensor.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = loss_fn().item()
            flat[i] = orig - epsilon
            down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * epsilon)
            denom = max(abs(a_flat[i]), abs(numeric), rel_floor)
            worst = max(worst, abs(a_flat[i] - numeric) / denom)
    store.zero_grad()
    return worst
