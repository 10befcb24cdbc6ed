"""Minimal dense-tensor engine with reverse-mode autodiff."""

from . import functional
from .container import ContainerError, load_tensors, save_tensors
from .tensor import (
    ShapeError,
    Tensor,
    as_tensor,
    default_dtype,
    grad_enabled,
    no_grad,
    precision,
    set_default_dtype,
    tensor,
    zero_grads,
)

__all__ = [
    "ContainerError",
    "ShapeError",
    "Tensor",
    "as_tensor",
    "default_dtype",
    "functional",
    "grad_enabled",
    "load_tensors",
    "no_grad",
    "precision",
    "save_tensors",
    "set_default_dtype",
    "tensor",
    "zero_grads",
]
