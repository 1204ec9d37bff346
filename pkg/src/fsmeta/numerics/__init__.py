"""Minimal dense tensors with reverse-mode autodiff."""

from . import functional
from .functional import (
    BatchNormState,
    batch_norm2d,
    conv2d,
    linear,
    log_softmax,
    max_pool2d,
    relu,
)
from .serialize import FormatError, load_tensor, read_tensor, save_tensor, write_tensor
from .tensor import NumericError, Parameter, Tensor, backward, no_grad

__all__ = [
    "BatchNormState",
    "FormatError",
    "NumericError",
    "Parameter",
    "Tensor",
    "backward",
    "batch_norm2d",
    "conv2d",
    "functional",
    "linear",
    "load_tensor",
    "log_softmax",
    "max_pool2d",
    "no_grad",
    "read_tensor",
    "relu",
    "save_tensor",
    "write_tensor",
]
