"""Differentiable primitives.

Shapes follow a batch-time-channel layout (``B x T x C``) wherever a time
axis exists.
"""
from __future__ import annotations

import numpy as np

from ..errors import InvalidInput
from .tensor import Tensor, as_tensor, needs_grad, record


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_shapes(op, *arrays):
    try:
        np.broadcast_shapes(*(a.shape for a in arrays))
    except ValueError:
        raise InvalidInput(f"{op}: incompatible shapes {[a.shape for a in arrays]}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    _check_shapes("add", ad, bd)
    out = Tensor(ad + bd)
    if needs_grad(a, b):
        record(out, (a, b), lambda g: (_unbroadcast(g, ad.shape), _unbroadcast(g, bd.shape)))
    return out


def sub(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    _check_shapes("sub", ad, bd)
    out = Tensor(ad - bd)
    if needs_grad(a, b):
        record(out, (a, b), lambda g: (_unbroadcast(g, ad.shape), _unbroadcast(-g, bd.shape)))
    return out


def mul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    _check_shapes("mul", ad, bd)
    out = Tensor(ad * bd)
    if needs_grad(a, b):
        record(out, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))
    return out


def scale(a, c: float) -> Tensor:
    return mul(a, np.asarray(c, dtype=_data(a).dtype))


def matmul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise InvalidInput(f"matmul: incompatible shapes {ad.shape} @ {bd.shape}")
    out = Tensor(ad @ bd)
    if needs_grad(a, b):
        def backward(g):
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.swapaxes(ad, -1, -2) @ g
            return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)
        record(out, (a, b), backward)
    return out


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` over the last axis; ``w`` is ``in x out``."""
    xd, wd = _data(x), _data(w)
    if xd.shape[-1] != wd.shape[0]:
        raise InvalidInput(f"linear: input {xd.shape} does not match weight {wd.shape}")
    y = xd @ wd
    if b is not None:
        y = y + _data(b)
    out = Tensor(y)
    if needs_grad(x, w, b):
        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            gw = xd.reshape(-1, xd.shape[-1]).T @ g2
            gb = g2.sum(axis=0) if b is not None else None
            return g @ wd.T, gw, gb
        record(out, (x, w, b), backward)
    return out


# ---------------------------------------------------------------------------
# shape manipulation


def getitem(x, idx) -> Tensor:
    xd = _data(x)
    out = Tensor(xd[idx])
    if needs_grad(x):
        def backward(g):
            gx = np.zeros_like(xd)
            np.add.at(gx, idx, g) if _has_array_index(idx) else gx.__setitem__(idx, g)
            return (gx,)
        record(out, (x,), backward)
    return out


def _has_array_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def reshape(x, shape) -> Tensor:
    xd = _data(x)
    out = Tensor(xd.reshape(shape))
    if needs_grad(x):
        record(out, (x,), lambda g: (g.reshape(xd.shape),))
    return out


def transpose(x, axes) -> Tensor:
    xd = _data(x)
    out = Tensor(np.transpose(xd, axes))
    if needs_grad(x):
        inv = np.argsort(axes)
        record(out, (x,), lambda g: (np.transpose(g, inv),))
    return out


def concat(xs, axis: int = -1) -> Tensor:
    datas = [_data(x) for x in xs]
    try:
        out = Tensor(np.concatenate(datas, axis=axis))
    except ValueError:
        raise InvalidInput(f"concat: incompatible shapes {[d.shape for d in datas]}") from None
    if needs_grad(*xs):
        bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]
        record(out, tuple(xs), lambda g: tuple(np.split(g, bounds, axis=axis)))
    return out


def stack(xs, axis: int = 0) -> Tensor:
    datas = [_data(x) for x in xs]
    out = Tensor(np.stack(datas, axis=axis))
    if needs_grad(*xs):
        n = len(datas)
        record(out, tuple(xs),
               lambda g: tuple(np.squeeze(p, axis=axis) for p in np.split(g, n, axis=axis)))
    return out


def expand_time(x, t: int) -> Tensor:
    """``B x C`` -> ``B x t x C`` by repetition."""
    xd = _data(x)
    out = Tensor(np.repeat(xd[:, None, :], t, axis=1))
    if needs_grad(x):
        record(out, (x,), lambda g: (g.sum(axis=1),))
    return out


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    xd = _data(x)
    out = Tensor(np.asarray(xd.sum(axis=axis, keepdims=keepdims)))
    if needs_grad(x):
        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, xd.shape).copy(),)
        record(out, (x,), backward)
    return out


def mean(x, axis=None) -> Tensor:
    xd = _data(x)
    n = xd.size if axis is None else xd.shape[axis]
    return scale(sum(x, axis=axis), 1.0 / n)


# ---------------------------------------------------------------------------
# nonlinearities


def _unary(x, fwd, grad_fn):
    xd = _data(x)
    y = fwd(xd)
    out = Tensor(y)
    if needs_grad(x):
        record(out, (x,), lambda g: (g * grad_fn(xd, y),))
    return out


def tanh(x) -> Tensor:
    return _unary(x, np.tanh, lambda x, y: 1.0 - y * y)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x) -> Tensor:
    return _unary(x, _sigmoid, lambda x, y: y * (1.0 - y))


def relu(x) -> Tensor:
    return _unary(x, lambda x: np.maximum(x, 0), lambda x, y: (x > 0).astype(x.dtype))


def softplus(x) -> Tensor:
    return _unary(x, lambda x: np.logaddexp(0, x).astype(x.dtype), lambda x, y: _sigmoid(x))


def exp(x) -> Tensor:
    return _unary(x, np.exp, lambda x, y: y)


def log(x) -> Tensor:
    return _unary(x, np.log, lambda x, y: 1.0 / x)


def softmax(x, axis: int = -1) -> Tensor:
    xd = _data(x)
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)
    if needs_grad(x):
        record(out, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))
    return out


def log_softmax(x, axis: int = -1) -> Tensor:
    xd = _data(x)
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = Tensor(y)
    if needs_grad(x):
        record(out, (x,), lambda g: (g - np.exp(y) * g.sum(axis=axis, keepdims=True),))
    return out


def masked_softmax(x, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax restricted to ``mask``; masked entries are exactly zero."""
    xd = _data(x)
    m = np.asarray(mask, dtype=bool)
    filled = np.where(m, xd, -np.inf)
    top = filled.max(axis=axis, keepdims=True)
    e = np.where(m, np.exp(np.where(m, xd - top, 0.0)), 0.0).astype(xd.dtype)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)
    if needs_grad(x):
        record(out, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))
    return out


def dropout(x, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return as_tensor(x)
    xd = _data(x)
    keep = (rng.random(xd.shape) >= p).astype(xd.dtype) / (1.0 - p)
    return mul(x, keep)


# ---------------------------------------------------------------------------
# convolution, pooling, normalization, lookup


def _im2col(xp: np.ndarray, k: int, stride: int, t_out: int) -> np.ndarray:
    idx = np.arange(t_out)[:, None] * stride + np.arange(k)[None, :]
    cols = xp[:, idx, :]  # B x To x K x C
    return cols.reshape(xp.shape[0], t_out, -1)


def conv1d(x, w, b=None, stride: int = 1, padding: int | tuple[int, int] = 0) -> Tensor:
    """1-D convolution over time. ``x``: B x T x Cin, ``w``: K x Cin x Cout."""
    xd, wd = _data(x), _data(w)
    if xd.ndim != 3 or wd.ndim != 3 or xd.shape[2] != wd.shape[1]:
        raise InvalidInput(f"conv1d: input {xd.shape} does not match kernel {wd.shape}")
    k, cin, cout = wd.shape
    pl, pr = (padding, padding) if isinstance(padding, int) else padding
    xp = np.pad(xd, ((0, 0), (pl, pr), (0, 0)))
    t_out = (xp.shape[1] - k) // stride + 1
    if t_out < 1:
        raise InvalidInput(f"conv1d: input of length {xd.shape[1]} too short for kernel {k}")
    cols = _im2col(xp, k, stride, t_out)
    wr = wd.reshape(k * cin, cout)
    y = cols @ wr
    if b is not None:
        y = y + _data(b)
    out = Tensor(y)
    if needs_grad(x, w, b):
        def backward(g):
            g2 = g.reshape(-1, cout)
            gw = (cols.reshape(-1, k * cin).T @ g2).reshape(k, cin, cout)
            gb = g2.sum(axis=0) if b is not None else None
            gcols = (g @ wr.T).reshape(g.shape[0], t_out, k, cin)
            gxp = np.zeros_like(xp)
            pos = np.arange(t_out) * stride
            for j in range(k):
                gxp[:, pos + j, :] += gcols[:, :, j, :]
            return gxp[:, pl:pl + xd.shape[1], :], gw, gb
        record(out, (x, w, b), backward)
    return out


def max_pool1d(x, k: int = 2) -> Tensor:
    xd = _data(x)
    bsz, t, c = xd.shape
    if t % k:
        raise InvalidInput(f"max_pool1d: length {t} not divisible by {k}")
    r = xd.reshape(bsz, t // k, k, c)
    arg = r.argmax(axis=2)
    y = np.take_along_axis(r, arg[:, :, None, :], axis=2)[:, :, 0, :]
    out = Tensor(y)
    if needs_grad(x):
        def backward(g):
            gr = np.zeros_like(r)
            np.put_along_axis(gr, arg[:, :, None, :], g[:, :, None, :], axis=2)
            return (gr.reshape(xd.shape),)
        record(out, (x,), backward)
    return out


IN_EPS = 1e-5


def instance_norm(x, mask: np.ndarray | None = None, eps: float = IN_EPS) -> Tensor:
    """Per-utterance, per-channel standardization over valid frames, no affine.

    ``y = (x - mean) / (std + eps)`` with population std; padded frames give 0.
    """
    xd = _data(x)
    if mask is None:
        mask = np.ones(xd.shape[:2], dtype=bool)
    m = np.asarray(mask, dtype=xd.dtype)[:, :, None]
    n = m.sum(axis=1, keepdims=True)
    mu = (xd * m).sum(axis=1, keepdims=True) / n
    xc = (xd - mu) * m
    sd = np.sqrt((xc * xc).sum(axis=1, keepdims=True) / n)
    denom = sd + eps
    y = xc / denom
    out = Tensor(y)
    if needs_grad(x):
        def backward(g):
            g = g * m
            gxc = g / denom
            gsd = -(g * xc).sum(axis=1, keepdims=True) / denom ** 2
            safe = np.where(sd > 0, sd, 1.0)
            gxc = gxc + np.where(sd > 0, gsd / (n * safe), 0.0) * xc
            gx = m * (gxc - (gxc * m).sum(axis=1, keepdims=True) / n)
            return (gx,)
        record(out, (x,), backward)
    return out


def embedding(table, ids) -> Tensor:
    td = _data(table)
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(td[ids])
    if needs_grad(table):
        def backward(g):
            gt = np.zeros_like(td)
            np.add.at(gt, ids, g)
            return (gt,)
        record(out, (table,), backward)
    return out


# ---------------------------------------------------------------------------
# losses


def masked_mse(pred, target, mask: np.ndarray) -> Tensor:
    """Mean squared error over valid frames; ``mask`` is B x T."""
    pd, td = _data(pred), _data(target)
    if pd.shape != td.shape:
        raise InvalidInput(f"masked_mse: prediction {pd.shape} vs target {td.shape}")
    m = np.asarray(mask, dtype=pd.dtype)[..., None]
    count = m.sum() * pd.shape[-1]
    diff = np.where(m > 0, pd - td, 0.0).astype(pd.dtype)
    out = Tensor(np.asarray((diff * diff).sum() / count, dtype=pd.dtype))
    if needs_grad(pred):
        record(out, (pred,), lambda g: (g * 2.0 * diff / count,))
    return out


def masked_bce_with_logits(logits, target, mask: np.ndarray, pos_weight: float = 1.0) -> Tensor:
    """Mean weighted binary cross-entropy over valid positions."""
    ld, td = _data(logits), np.asarray(target, dtype=_data(logits).dtype)
    if ld.shape != td.shape:
        raise InvalidInput(f"masked_bce: logits {ld.shape} vs target {td.shape}")
    m = np.asarray(mask, dtype=ld.dtype)
    count = m.sum()
    # -[w t log s(x) + (1-t) log(1-s(x))]
    log_sig = -np.logaddexp(0, -ld)
    log_one_minus = -np.logaddexp(0, ld)
    loss = -(pos_weight * td * log_sig + (1 - td) * log_one_minus)
    out = Tensor(np.asarray((loss * m).sum() / count, dtype=ld.dtype))
    if needs_grad(logits):
        s = _sigmoid(ld)
        dl = pos_weight * td * (s - 1.0) + (1 - td) * s
        record(out, (logits,), lambda g: (g * dl * m / count,))
    return out
