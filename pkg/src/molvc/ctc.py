"""CTC log-likelihood (forward-backward in the log domain) and greedy decoding."""
from __future__ import annotations

import numpy as np

from .errors import InfeasibleTarget, InvalidInput
from .nn.tensor import Tensor, needs_grad, record

NEG_INF = -np.inf


def min_frames(target) -> int:
    """Fewest frames that can emit ``target``: one per label plus a blank between repeats."""
    target = list(target)
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def _extend(target, blank):
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    skip = np.zeros(ext.size, dtype=bool)
    for s in range(2, ext.size):
        skip[s] = ext[s] != blank and ext[s] != ext[s - 2]
    return ext, skip


def _shift(x, k, right=True):
    """Shift along the state axis by ``k``, filling with -inf."""
    out = np.full_like(x, NEG_INF)
    n = x.shape[1]
    if k < n:
        if right:
            out[:, k:] = x[:, :n - k]
        else:
            out[:, :n - k] = x[:, k:]
    return out


def _lse(*xs):
    out = xs[0]
    for x in xs[1:]:
        out = np.logaddexp(out, x)
    return out


def _prepare(targets, input_lengths, blank, t_max):
    bsz = len(targets)
    exts, skips = zip(*(_extend(list(t), blank) for t in targets))
    s_max = max(e.size for e in exts)
    ext = np.full((bsz, s_max), blank, dtype=np.int64)
    skip = np.zeros((bsz, s_max), dtype=bool)
    valid = np.zeros((bsz, s_max), dtype=bool)
    for b, (e, k) in enumerate(zip(exts, skips)):
        ext[b, :e.size] = e
        skip[b, :e.size] = k
        valid[b, :e.size] = True
        if input_lengths[b] < min_frames(targets[b]):
            raise InfeasibleTarget(
                f"target of length {len(targets[b])} needs {min_frames(targets[b])} frames, got {input_lengths[b]}")
        if input_lengths[b] > t_max or input_lengths[b] < 1:
            raise InvalidInput(f"input length {input_lengths[b]} outside 1..{t_max}")
    s_len = np.array([e.size for e in exts])
    return ext, skip, valid, s_len


def ctc_forward_backward(log_probs: np.ndarray, targets, input_lengths, blank: int,
                         need_grad: bool = True):
    """Batched CTC over ``log_probs`` (B x T x C).

    Returns ``(log_likelihood[B], grad[B,T,C] or None)`` where ``grad`` is
    d log p / d log_probs. ``beta`` excludes the emission at its own frame,
    so the occupancy of state s at t is ``exp(alpha + beta - log p)``.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    bsz, t_max, _ = lp.shape
    input_lengths = np.asarray(input_lengths, dtype=np.int64)
    ext, skip, valid, s_len = _prepare(targets, input_lengths, blank, t_max)
    s_max = ext.shape[1]
    rows = np.arange(bsz)[:, None]
    emit = lp[rows[:, :, None], np.arange(t_max)[None, :, None], ext[:, None, :]]  # B x T x S
    emit = np.where(valid[:, None, :], emit, NEG_INF)

    alpha = np.full((bsz, t_max, s_max), NEG_INF)
    alpha[:, 0, 0] = emit[:, 0, 0]
    alpha[:, 0, 1:2] = np.where(s_len[:, None] > 1, emit[:, 0, 1:2], NEG_INF)
    for t in range(1, t_max):
        prev = alpha[:, t - 1]
        one = _shift(prev, 1)
        two = np.where(skip, _shift(prev, 2), NEG_INF)
        alpha[:, t] = _lse(prev, one, two) + emit[:, t]
    last = input_lengths - 1
    a_end = alpha[np.arange(bsz), last]  # B x S
    end1 = a_end[np.arange(bsz), s_len - 1]
    end2 = np.where(s_len > 1, a_end[np.arange(bsz), np.maximum(s_len - 2, 0)], NEG_INF)
    ll = np.logaddexp(end1, end2)
    if not need_grad:
        return ll, None

    beta = np.full((bsz, t_max, s_max), NEG_INF)
    for t in range(t_max - 1, -1, -1):
        init = np.full((bsz, s_max), NEG_INF)
        init[np.arange(bsz), s_len - 1] = 0.0
        init[np.arange(bsz), np.maximum(s_len - 2, 0)] = np.where(s_len > 1, 0.0, init[np.arange(bsz), 0])
        if t < t_max - 1:
            nxt = beta[:, t + 1] + emit[:, t + 1]
            one = _shift(nxt, 1, right=False)
            skip_next = np.zeros_like(skip)
            skip_next[:, :max(s_max - 2, 0)] = skip[:, 2:]
            two = np.where(skip_next, _shift(nxt, 2, right=False), NEG_INF)
            rec = _lse(nxt, one, two)
        else:
            rec = np.full((bsz, s_max), NEG_INF)
        is_last = (t == last)[:, None]
        beta[:, t] = np.where(is_last, init, np.where((t < last)[:, None], rec, NEG_INF))

    occ = np.exp(alpha + beta - ll[:, None, None])  # B x T x S
    grad = np.zeros_like(lp)
    b_idx = np.broadcast_to(rows[:, :, None], occ.shape)
    t_idx = np.broadcast_to(np.arange(t_max)[None, :, None], occ.shape)
    s_idx = np.broadcast_to(ext[:, None, :], occ.shape)
    np.add.at(grad, (b_idx, t_idx, s_idx), np.where(valid[:, None, :], occ, 0.0))
    return ll, grad


def ctc_log_likelihood(log_probs, targets, input_lengths=None, blank: int | None = None):
    """log p_ctc(target | x) per utterance.

    ``log_probs`` is a Tensor or array of per-frame log posteriors, B x T x C
    (or T x C for a single utterance, with ``targets`` a single sequence).
    ``blank`` defaults to the last class.
    """
    data = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    single = data.ndim == 2
    if single:
        data = data[None]
        targets = [list(targets)]
    if blank is None:
        blank = data.shape[-1] - 1
    if input_lengths is None:
        input_lengths = [data.shape[1]] * data.shape[0]
    grad_needed = isinstance(log_probs, Tensor) and needs_grad(log_probs)
    ll, grad = ctc_forward_backward(data, targets, input_lengths, blank, grad_needed)
    if not isinstance(log_probs, Tensor):
        return float(ll[0]) if single else ll
    out = Tensor(ll.astype(data.dtype)[0] if single else ll.astype(data.dtype))
    if grad_needed:
        g_cast = grad.astype(data.dtype)

        def backward(g):
            gg = np.reshape(g, (-1, 1, 1)) * g_cast
            return (gg[0] if single else gg,)
        record(out, (log_probs,), backward)
    return out


def collapse(path, blank: int) -> list[int]:
    out = []
    prev = None
    for z in path:
        z = int(z)
        if z != prev and z != blank:
            out.append(z)
        prev = z
    return out


def greedy_ctc_decode(log_posteriors, blank: int | None = None, length: int | None = None) -> list[int]:
    lp = np.asarray(log_posteriors)
    if blank is None:
        blank = lp.shape[-1] - 1
    if length is not None:
        lp = lp[:length]
    return collapse(lp.argmax(axis=-1), blank)


def edit_distance(a, b) -> int:
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]
