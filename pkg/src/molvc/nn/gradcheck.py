"""Finite-difference verification of tape gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import VerificationImpossible
from .layers import ParameterStore
from .tensor import Tape, Tensor


def relative_error(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def grad_check(loss_fn: Callable[[], Tensor], store: ParameterStore, n_coords: int = 50,
               seed: int = 0, eps: float = 1e-4) -> dict[str, float]:
    """Compare tape gradients with central differences.

    ``loss_fn`` must rebuild the scalar loss from the current parameter
    values. Samples up to ``n_coords`` coordinates per parameter and returns
    the max relative error per parameter name.
    """
    base = loss_fn().item()
    if loss_fn().item() != base:
        raise VerificationImpossible("loss is not deterministic under a fixed seed")
    store.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    rng = np.random.default_rng(seed)
    report = {}
    for name, p in store:
        flat = p.data.reshape(-1)
        k = min(n_coords, flat.size)
        coords = np.sort(rng.choice(flat.size, size=k, replace=False))
        analytic = p.grad.reshape(-1)[coords].astype(np.float64)
        numeric = np.empty(k)
        for n, idx in enumerate(coords):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = loss_fn().item()
            flat[idx] = orig - eps
            down = loss_fn().item()
            flat[idx] = orig
            numeric[n] = (up - down) / (2 * eps)
        report[name] = float(relative_error(analytic, numeric).max())
    return report
