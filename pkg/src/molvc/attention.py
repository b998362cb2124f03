"""Attention mechanisms: discretized mixture-of-logistics (MoL) and location-sensitive.

MoL attention is location-relative: each decoder step shifts every
component mean forward by a softplus-positive amount, so alignments are
monotonic by construction. Positions are 1-based encoder frames.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput
from .nn import ops
from .nn.layers import Conv1d, Linear, Module
from .nn.tensor import Tensor, needs_grad, record

SCALE_FLOOR = 1e-3


def _sig(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x):
    return np.logaddexp(0, x).astype(x.dtype)


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class MoLParams:
    w: np.ndarray      # B x K, rows on the simplex
    mu: np.ndarray     # B x K, encoder-frame units
    scale: np.ndarray  # B x K, >= SCALE_FLOOR


def _component_mass(mu, scale, n_frames, dtype):
    """Per-component discretized logistic mass on frames 1..n: B x K x T.

    Returns the mass plus the pieces the backward pass needs.
    """
    j = np.arange(1, n_frames + 1, dtype=dtype)[None, None, :]
    m = mu[:, :, None]
    s = scale[:, :, None]
    z_hi = (j + 0.5 - m) / s
    z_lo = (j - 0.5 - m) / s
    f_hi, f_lo = _sig(z_hi), _sig(z_lo)
    # right of the mean, differencing the upper tails keeps precision
    upper = _sig(-z_lo) - _sig(-z_hi)
    mass = np.where(z_lo > 0, upper, f_hi - f_lo)
    return mass, (z_hi, z_lo, f_hi, f_lo, s)


def mol_weights(w, mu, scale, n_frames: int, mask=None) -> np.ndarray:
    """Attention row(s) for explicit mixture parameters (no gradient).

    ``w``, ``mu``, ``scale`` are K-vectors or B x K arrays.
    """
    single = np.ndim(mu) == 1
    w, mu, scale = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (w, mu, scale))
    mass, _ = _component_mass(mu, scale, n_frames, np.float64)
    alpha = (w[:, :, None] * mass).sum(axis=1)
    if mask is not None:
        alpha = alpha * np.atleast_2d(np.asarray(mask, dtype=bool))
    return alpha[0] if single else alpha


def mol_attention(raw, mu_prev, mask, scale_floor: float = SCALE_FLOOR):
    """One MoL attention step.

    ``raw`` (B x 3K) holds ``[w_hat, delta_hat, sigma_hat]`` from the MLP;
    ``mu_prev`` (B x K) are the previous means; ``mask`` (B x T) marks valid
    encoder frames. Returns ``(alpha, mu, params)`` where ``alpha`` and
    ``mu`` are Tensors; padded positions of ``alpha`` are zero and rows are
    not renormalized.
    """
    rd = raw.data if isinstance(raw, Tensor) else np.asarray(raw)
    mpd = mu_prev.data if isinstance(mu_prev, Tensor) else np.asarray(mu_prev, dtype=rd.dtype)
    if rd.ndim != 2 or rd.shape[1] % 3:
        raise InvalidInput(f"mol_attention: raw parameters must be B x 3K, got {rd.shape}")
    k = rd.shape[1] // 3
    if mpd.shape != (rd.shape[0], k):
        raise InvalidInput(f"mol_attention: previous means {mpd.shape} vs {(rd.shape[0], k)}")
    m = np.asarray(mask, dtype=rd.dtype)
    w_hat, d_hat, s_hat = rd[:, :k], rd[:, k:2 * k], rd[:, 2 * k:]
    w = _softmax(w_hat)
    delta = _softplus(d_hat)
    scale = _softplus(s_hat) + rd.dtype.type(scale_floor)
    mu = mpd + delta
    mass, (z_hi, z_lo, f_hi, f_lo, s3) = _component_mass(mu, scale, m.shape[1], rd.dtype)
    alpha = (w[:, :, None] * mass).sum(axis=1) * m
    a_out, mu_out = Tensor(alpha), Tensor(mu)
    if needs_grad(raw, mu_prev):
        def backward(g_alpha, g_mu):
            ga = (g_alpha * m)[:, None, :]                      # B x 1 x T
            gw = (mass * ga).sum(axis=2)                        # B x K
            gp = w[:, :, None] * ga                             # B x K x T
            d_hi, d_lo = f_hi * (1 - f_hi), f_lo * (1 - f_lo)
            gmu = g_mu + (gp * (d_lo - d_hi) / s3).sum(axis=2)
            gs = -(gp * (d_hi * z_hi - d_lo * z_lo) / s3).sum(axis=2)
            g_what = w * (gw - (gw * w).sum(axis=1, keepdims=True))
            g_raw = np.concatenate([g_what, gmu * _sig(d_hat), gs * _sig(s_hat)], axis=1)
            return g_raw, gmu
        record((a_out, mu_out), (raw, mu_prev), backward)
    return a_out, mu_out, MoLParams(w, mu, scale)


def context(alpha, memory) -> Tensor:
    """``c_b = sum_j alpha_bj h_bj``: B x T weights against B x T x D states."""
    a = alpha if isinstance(alpha, Tensor) else Tensor(np.asarray(alpha))
    return ops.reshape(ops.matmul(ops.reshape(a, (a.shape[0], 1, a.shape[1])), memory),
                       (a.shape[0], memory.shape[-1]))


def alignment_diagonality(alpha) -> float:
    """Fraction of attention mass within a band around ``j = (T/I) i``.

    The band half-width is ``max(2, 0.1 T)``; rows and columns are 1-based.
    """
    a = np.asarray(alpha, dtype=np.float64)
    if a.ndim != 2 or min(a.shape) < 1:
        raise InvalidInput(f"alignment must be a non-empty I x T matrix, got shape {a.shape}")
    n_i, n_t = a.shape
    total = a.sum()
    if total <= 0:
        return 0.0
    i = np.arange(1, n_i + 1)[:, None]
    j = np.arange(1, n_t + 1)[None, :]
    band = np.abs(j - (n_t / n_i) * i) <= max(2.0, 0.1 * n_t)
    return float((a * band).sum() / total)


class LocationSensitiveAttention(Module):
    """Content energies plus convolutional features of the previous alignment."""

    def __init__(self, query_dim, memory_dim, att_dim, n_filters, kernel, rng, dtype=np.float32):
        super().__init__()
        self.query = Linear(query_dim, att_dim, rng, dtype, bias=False)
        self.memory = Linear(memory_dim, att_dim, rng, dtype)
        self.location_conv = Conv1d(1, n_filters, kernel, rng, dtype, bias=False)
        self.location = Linear(n_filters, att_dim, rng, dtype, bias=False)
        self.v = Linear(att_dim, 1, rng, dtype, bias=False)

    def keys(self, memory) -> Tensor:
        return self.memory(memory)

    def __call__(self, query, prev_alpha, keys, mask) -> Tensor:
        bsz, t_len = mask.shape
        loc = self.location_conv(ops.reshape(prev_alpha, (bsz, t_len, 1)))
        q = ops.reshape(self.query(query), (bsz, 1, -1))
        e = self.v(ops.tanh(ops.add(ops.add(keys, q), self.location(loc))))
        return ops.masked_softmax(ops.reshape(e, (bsz, t_len)), mask, axis=-1)


def initial_alignment(mask: np.ndarray, dtype) -> np.ndarray:
    """All mass on the first frame, the usual starting point for LSA."""
    a = np.zeros(mask.shape, dtype=dtype)
    a[:, 0] = 1.0
    return a
