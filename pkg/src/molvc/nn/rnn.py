"""Fused recurrent kernels with hand-written backward passes.

A whole masked sequence is one tape node, which keeps the Python overhead of
the training loop proportional to the number of layers, not time steps.
Gate layouts: LSTM ``[i, f, g, o]``; GRU ``[r, z, n]`` with the reset gate
applied to the projected hidden state.
"""
from __future__ import annotations

import numpy as np

from ..errors import InvalidInput
from .tensor import Tensor, needs_grad, record


def _sig(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _d(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


# ---------------------------------------------------------------------------
# LSTM


def _lstm_fwd(gates, c_prev, hsz):
    i = _sig(gates[:, :hsz])
    f = _sig(gates[:, hsz:2 * hsz])
    g = np.tanh(gates[:, 2 * hsz:3 * hsz])
    o = _sig(gates[:, 3 * hsz:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    return o * tc, c, (i, f, g, o, tc)


def _lstm_bwd(dh, dc, c_prev, cache):
    i, f, g, o, tc = cache
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    dgates = np.concatenate([
        dc * g * i * (1.0 - i),
        dc * c_prev * f * (1.0 - f),
        dc * i * (1.0 - g * g),
        do * o * (1.0 - o),
    ], axis=1)
    return dgates, dc * f


def lstm_cell(x, h, c, wx, wh, b):
    """Single LSTM step; returns ``(h_new, c_new)``."""
    xd, hd, cd, wxd, whd, bd = map(_d, (x, h, c, wx, wh, b))
    hsz = hd.shape[1]
    if wxd.shape != (xd.shape[1], 4 * hsz) or whd.shape != (hsz, 4 * hsz):
        raise InvalidInput(f"lstm_cell: x {xd.shape}, h {hd.shape}, wx {wxd.shape}, wh {whd.shape}")
    gates = xd @ wxd + hd @ whd + bd
    h_new, c_new, cache = _lstm_fwd(gates, cd, hsz)
    ho, co = Tensor(h_new), Tensor(c_new)
    if needs_grad(x, h, c, wx, wh, b):
        def backward(gh, gc):
            dg, dc_prev = _lstm_bwd(gh, gc, cd, cache)
            return dg @ wxd.T, dg @ whd.T, dc_prev, xd.T @ dg, hd.T @ dg, dg.sum(axis=0)
        record((ho, co), (x, h, c, wx, wh, b), backward)
    return ho, co


def lstm_sequence(x, mask, wx, wh, b, reverse: bool = False) -> Tensor:
    """Run an LSTM over ``x`` (B x T x I) honouring ``mask`` (B x T).

    State is frozen on padded frames and outputs there are zero. A reverse
    pass starts every sequence from a zero state at its own last valid frame.
    """
    xd, wxd, whd, bd = map(_d, (x, wx, wh, b))
    bsz, t_len, _ = xd.shape
    hsz = whd.shape[0]
    if wxd.shape != (xd.shape[2], 4 * hsz):
        raise InvalidInput(f"lstm_sequence: input {xd.shape} vs weight {wxd.shape}")
    m = np.asarray(mask, dtype=xd.dtype)[:, :, None]
    xw = xd @ wxd + bd
    h = np.zeros((bsz, hsz), dtype=xd.dtype)
    c = np.zeros_like(h)
    ys = np.zeros((bsz, t_len, hsz), dtype=xd.dtype)
    steps = range(t_len - 1, -1, -1) if reverse else range(t_len)
    caches = []
    for t in steps:
        mt = m[:, t]
        gates = xw[:, t] + h @ whd
        h_new, c_new, cache = _lstm_fwd(gates, c, hsz)
        caches.append((t, h, c, cache))
        h = mt * h_new + (1 - mt) * h
        c = mt * c_new + (1 - mt) * c
        ys[:, t] = mt * h_new
    out = Tensor(ys)
    if needs_grad(x, wx, wh, b):
        def backward(gy):
            dxw = np.zeros((bsz, t_len, 4 * hsz), dtype=xd.dtype)
            dwh = np.zeros_like(whd)
            dh = np.zeros((bsz, hsz), dtype=xd.dtype)
            dc = np.zeros_like(dh)
            for t, h_prev, c_prev, cache in reversed(caches):
                mt = m[:, t]
                dh_new = mt * (dh + gy[:, t])
                dc_new = mt * dc
                dg, dc_from = _lstm_bwd(dh_new, dc_new, c_prev, cache)
                dxw[:, t] = dg
                dwh += h_prev.T @ dg
                dh = (1 - mt) * dh + dg @ whd.T
                dc = (1 - mt) * dc + dc_from
            flat = dxw.reshape(-1, 4 * hsz)
            return (dxw @ wxd.T, xd.reshape(-1, xd.shape[2]).T @ flat, dwh, flat.sum(axis=0))
        record(out, (x, wx, wh, b), backward)
    return out


# ---------------------------------------------------------------------------
# GRU


def gru_sequence(x, mask, wx, wh, bx, bh, reverse: bool = False) -> Tensor:
    """Masked GRU over B x T x I; same padding semantics as :func:`lstm_sequence`."""
    xd, wxd, whd, bxd, bhd = map(_d, (x, wx, wh, bx, bh))
    bsz, t_len, _ = xd.shape
    hsz = whd.shape[0]
    if wxd.shape != (xd.shape[2], 3 * hsz):
        raise InvalidInput(f"gru_sequence: input {xd.shape} vs weight {wxd.shape}")
    m = np.asarray(mask, dtype=xd.dtype)[:, :, None]
    xw = xd @ wxd + bxd
    h = np.zeros((bsz, hsz), dtype=xd.dtype)
    ys = np.zeros((bsz, t_len, hsz), dtype=xd.dtype)
    steps = range(t_len - 1, -1, -1) if reverse else range(t_len)
    caches = []
    for t in steps:
        mt = m[:, t]
        hw = h @ whd + bhd
        xr, xz, xn = np.split(xw[:, t], 3, axis=1)
        hr, hz, hn = np.split(hw, 3, axis=1)
        r = _sig(xr + hr)
        z = _sig(xz + hz)
        n = np.tanh(xn + r * hn)
        h_new = (1 - z) * n + z * h
        caches.append((t, h, r, z, n, hn))
        h = mt * h_new + (1 - mt) * h
        ys[:, t] = mt * h_new
    out = Tensor(ys)
    if needs_grad(x, wx, wh, bx, bh):
        def backward(gy):
            dxw = np.zeros((bsz, t_len, 3 * hsz), dtype=xd.dtype)
            dwh = np.zeros_like(whd)
            dbh = np.zeros_like(bhd)
            dh = np.zeros((bsz, hsz), dtype=xd.dtype)
            for t, h_prev, r, z, n, hn in reversed(caches):
                mt = m[:, t]
                dh_new = mt * (dh + gy[:, t])
                dn = dh_new * (1 - z)
                dz = dh_new * (h_prev - n)
                dn_pre = dn * (1 - n * n)
                dr_pre = dn_pre * hn * r * (1 - r)
                dz_pre = dz * z * (1 - z)
                gx = np.concatenate([dr_pre, dz_pre, dn_pre], axis=1)
                gh = np.concatenate([dr_pre, dz_pre, dn_pre * r], axis=1)
                dxw[:, t] = gx
                dwh += h_prev.T @ gh
                dbh += gh.sum(axis=0)
                dh = (1 - mt) * dh + dh_new * z + gh @ whd.T
            flat = dxw.reshape(-1, 3 * hsz)
            return (dxw @ wxd.T, xd.reshape(-1, xd.shape[2]).T @ flat, dwh, flat.sum(axis=0), dbh)
        record(out, (x, wx, wh, bx, bh), backward)
    return out
