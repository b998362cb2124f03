"""Arrays with reverse-mode gradients recorded on an explicit tape.

Operations record a node only while a :class:`Tape` is active and at least
one input requires a gradient; outside a tape every op is a plain numpy
computation, so inference and finite-difference probes run the exact same
forward code as training.
"""
from __future__ import annotations

import threading

import numpy as np

from ..errors import InvalidInput

_local = threading.local()


def current_tape() -> "Tape | None":
    return getattr(_local, "tape", None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        kind = "Parameter" if isinstance(self, Parameter) else "Tensor"
        return f"{kind}(shape={self.shape}, dtype={self.dtype}{', grad' if self.requires_grad else ''})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(np.asarray(data), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


def needs_grad(*tensors) -> bool:
    if current_tape() is None:
        return False
    return any(isinstance(t, Tensor) and t.requires_grad for t in tensors)


def record(outputs, inputs, backward) -> None:
    """Register a node: ``backward(*output_grads)`` returns one grad per input.

    Call only when :func:`needs_grad` is true. ``outputs`` may be a Tensor or
    a tuple of Tensors; missing output grads are passed as zeros.
    """
    tape = current_tape()
    outs = outputs if isinstance(outputs, tuple) else (outputs,)
    for o in outs:
        o.requires_grad = True
    tape.nodes.append((outs, tuple(inputs), backward))


class Tape:
    """Ordered record of the forward pass; consumed by one backward sweep."""

    def __init__(self):
        self.nodes: list = []
        self.consumed = False
        self._prev = None

    def __enter__(self):
        self._prev = current_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev
        return False

    def backward(self, loss: Tensor, loss_grad: float = 1.0) -> None:
        """Accumulate d(loss)/d(param) into every reachable ``Parameter.grad``."""
        if self.consumed:
            raise InvalidInput("tape already consumed; run a new forward pass")
        if loss.data.size != 1:
            raise InvalidInput(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        grads = {id(loss): np.full(loss.shape, loss_grad, dtype=loss.dtype)}
        leaves = {}
        for outs, inputs, fn in reversed(self.nodes):
            gouts = [grads.pop(id(o), None) for o in outs]
            if all(g is None for g in gouts):
                continue
            gouts = [np.zeros_like(o.data) if g is None else g for o, g in zip(outs, gouts)]
            gins = fn(*gouts)
            for inp, g in zip(inputs, gins):
                if g is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                key = id(inp)
                if isinstance(inp, Parameter):
                    leaves[key] = inp
                prev = grads.get(key)
                grads[key] = g if prev is None else prev + g
        if id(loss) in grads and isinstance(loss, Parameter):
            leaves[id(loss)] = loss
        for key, p in leaves.items():
            p.grad += grads[key]
        self.nodes.clear()
