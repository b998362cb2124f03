"""Parameterized layers and the parameter store."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from ..errors import InvalidCheckpoint
from . import ops
from .rnn import gru_sequence, lstm_cell, lstm_sequence
from .tensor import Parameter, Tensor


def glorot(rng, shape, fan_in, fan_out, dtype):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape).astype(dtype)


def orthogonal(rng, n, dtype):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return (q * np.sign(np.diag(r))).astype(dtype)


def recurrent_matrix(rng, hidden, n_gates, dtype):
    return np.concatenate([orthogonal(rng, hidden, dtype) for _ in range(n_gates)], axis=1)


class Module:
    """Registers Parameters and child Modules in attribute-assignment order."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


class ParameterStore:
    """Named parameters of a module plus their gradient accumulators."""

    def __init__(self, module: Module):
        self.params: OrderedDict[str, Parameter] = OrderedDict(module.named_parameters())
        for name, p in self.params.items():
            p.name = name

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = np.zeros_like(p.data)

    def grads(self) -> dict[str, np.ndarray]:
        return {n: p.grad for n, p in self.params.items()}

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in self.params.values())))

    def state_dict(self) -> OrderedDict:
        return OrderedDict((n, p.data.copy()) for n, p in self.params.items())

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        missing = [n for n in self.params if n not in state]
        if missing:
            raise InvalidCheckpoint(f"checkpoint lacks parameters: {missing[:5]}")
        extra = [n for n in state if n not in self.params and not n.startswith("meta/")]
        if strict and extra:
            raise InvalidCheckpoint(f"checkpoint has unknown parameters: {extra[:5]}")
        for n, p in self.params.items():
            arr = np.asarray(state[n])
            if arr.shape != p.data.shape:
                raise InvalidCheckpoint(f"shape mismatch for {n}: checkpoint {arr.shape}, model {p.data.shape}")
            p.data = arr.astype(p.data.dtype).copy()
            p.grad = np.zeros_like(p.data)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, dtype=np.float32, bias=True):
        super().__init__()
        self.weight = Parameter(glorot(rng, (n_in, n_out), n_in, n_out, dtype))
        if bias:
            self.bias = Parameter(np.zeros(n_out, dtype=dtype))
        else:
            self.bias = None

    def __call__(self, x) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Conv1d(Module):
    def __init__(self, n_in, n_out, kernel, rng, dtype=np.float32, stride=1, padding=None, bias=True):
        super().__init__()
        self.weight = Parameter(glorot(rng, (kernel, n_in, n_out), kernel * n_in, kernel * n_out, dtype))
        self.bias = Parameter(np.zeros(n_out, dtype=dtype)) if bias else None
        self.stride = stride
        self.padding = (kernel - 1) // 2 if padding is None else padding

    def __call__(self, x) -> Tensor:
        return ops.conv1d(x, self.weight, self.bias, self.stride, self.padding)


class Embedding(Module):
    def __init__(self, n, dim, rng, dtype=np.float32):
        super().__init__()
        self.weight = Parameter((rng.standard_normal((n, dim)) * 0.3).astype(dtype))

    def __call__(self, ids) -> Tensor:
        return ops.embedding(self.weight, ids)


class LSTM(Module):
    """Unidirectional masked LSTM layer over a whole sequence."""

    def __init__(self, n_in, hidden, rng, dtype=np.float32, reverse=False):
        super().__init__()
        self.wx = Parameter(glorot(rng, (n_in, 4 * hidden), n_in, 4 * hidden, dtype))
        self.wh = Parameter(recurrent_matrix(rng, hidden, 4, dtype))
        b = np.zeros(4 * hidden, dtype=dtype)
        b[hidden:2 * hidden] = 1.0
        self.b = Parameter(b)
        self.reverse = reverse
        self.hidden = hidden

    def __call__(self, x, mask) -> Tensor:
        return lstm_sequence(x, mask, self.wx, self.wh, self.b, self.reverse)


class LSTMCell(Module):
    def __init__(self, n_in, hidden, rng, dtype=np.float32):
        super().__init__()
        self.wx = Parameter(glorot(rng, (n_in, 4 * hidden), n_in, 4 * hidden, dtype))
        self.wh = Parameter(recurrent_matrix(rng, hidden, 4, dtype))
        b = np.zeros(4 * hidden, dtype=dtype)
        b[hidden:2 * hidden] = 1.0
        self.b = Parameter(b)
        self.hidden = hidden

    def zero_state(self, batch, dtype):
        z = np.zeros((batch, self.hidden), dtype=dtype)
        return Tensor(z), Tensor(z.copy())

    def __call__(self, x, state):
        h, c = state
        return lstm_cell(x, h, c, self.wx, self.wh, self.b)


class GRU(Module):
    def __init__(self, n_in, hidden, rng, dtype=np.float32, reverse=False):
        super().__init__()
        self.wx = Parameter(glorot(rng, (n_in, 3 * hidden), n_in, 3 * hidden, dtype))
        self.wh = Parameter(recurrent_matrix(rng, hidden, 3, dtype))
        self.bx = Parameter(np.zeros(3 * hidden, dtype=dtype))
        self.bh = Parameter(np.zeros(3 * hidden, dtype=dtype))
        self.reverse = reverse

    def __call__(self, x, mask) -> Tensor:
        return gru_sequence(x, mask, self.wx, self.wh, self.bx, self.bh, self.reverse)


class Bidirectional(Module):
    def __init__(self, cell_cls, n_in, hidden, rng, dtype=np.float32):
        super().__init__()
        self.fwd = cell_cls(n_in, hidden, rng, dtype)
        self.bwd = cell_cls(n_in, hidden, rng, dtype, reverse=True)

    def __call__(self, x, mask) -> Tensor:
        return ops.concat([self.fwd(x, mask), self.bwd(x, mask)], axis=-1)


def cast_module(module: Module, dtype) -> Module:
    """Convert every parameter of ``module`` in place (e.g. to f64 for gradient checks)."""
    for _, p in module.named_parameters():
        p.data = p.data.astype(dtype)
        p.grad = np.zeros_like(p.data)
    return module
