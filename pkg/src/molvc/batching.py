"""Padding, masks and batch assembly for variable-length sequences."""
from __future__ import annotations

import numpy as np

from .errors import InvalidInput

TIME_REDUCTION = 4


def padded_length(n: int, multiple: int = TIME_REDUCTION) -> int:
    return -(-n // multiple) * multiple


def pad_repeat(x: np.ndarray, multiple: int = TIME_REDUCTION) -> np.ndarray:
    """Right-pad the time axis (axis 0) by repeating the last frame."""
    x = np.asarray(x)
    if x.shape[0] == 0:
        raise InvalidInput("cannot pad an empty sequence")
    extra = padded_length(x.shape[0], multiple) - x.shape[0]
    if extra == 0:
        return x
    return np.concatenate([x, np.repeat(x[-1:], extra, axis=0)], axis=0)


def lengths_mask(lengths, t_max: int | None = None) -> np.ndarray:
    lengths = np.asarray(lengths, dtype=np.int64)
    t_max = int(lengths.max()) if t_max is None else t_max
    return np.arange(t_max)[None, :] < lengths[:, None]


def pad_batch(seqs, dtype=np.float32, fill: float = 0.0):
    """Stack T_i x ... arrays into B x T_max x ... with ``fill``; returns (array, lengths)."""
    lengths = np.array([s.shape[0] for s in seqs], dtype=np.int64)
    t_max = int(lengths.max())
    out = np.full((len(seqs), t_max) + seqs[0].shape[1:], fill, dtype=dtype)
    for b, s in enumerate(seqs):
        out[b, :s.shape[0]] = s
    return out, lengths
