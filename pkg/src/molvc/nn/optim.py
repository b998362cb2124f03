"""Adam with global-norm gradient clipping."""
from __future__ import annotations

import numpy as np

from ..errors import PoisonedStep
from .layers import ParameterStore


class Adam:
    def __init__(self, store: ParameterStore, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=1.0):
        self.store = store
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in store}
        self.v = {n: np.zeros_like(p.data) for n, p in store}

    def step(self) -> float:
        """Apply one update; returns the pre-clipping gradient norm."""
        for name, p in self.store:
            if not np.all(np.isfinite(p.grad)):
                raise PoisonedStep(name)
        norm = self.store.global_norm()
        factor = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            factor = self.clip_norm / norm
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.store:
            g = p.grad * factor
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)
        return norm


def adam_step(store: ParameterStore, state: Adam | None = None, lr=1e-3, beta1=0.9, beta2=0.999,
              eps=1e-8, clip_norm=1.0) -> Adam:
    """Functional form: one Adam step on ``store``; pass the returned state back in."""
    if state is None:
        state = Adam(store, lr, beta1, beta2, eps, clip_norm)
    state.step()
    return state
