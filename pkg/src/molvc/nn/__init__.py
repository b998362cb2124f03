"""Minimal numpy autodiff: tensors, tape, layers, Adam, gradient checking."""
from . import ops
from .gradcheck import grad_check, relative_error
from .layers import (GRU, LSTM, Bidirectional, Conv1d, Embedding, Linear, LSTMCell, Module,
                     ParameterStore, cast_module)
from .optim import Adam, adam_step
from .tensor import Parameter, Tape, Tensor, as_tensor, detach

__all__ = [
    "ops", "grad_check", "relative_error", "GRU", "LSTM", "Bidirectional", "Conv1d", "Embedding",
    "Linear", "LSTMCell", "Module", "ParameterStore", "cast_module", "Adam", "adam_step",
    "Parameter", "Tape", "Tensor", "as_tensor", "detach",
]
