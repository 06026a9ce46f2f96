"""Minimal reverse-mode automatic differentiation on numpy arrays."""

from . import ops
from .gradcheck import finite_diff_check, numerical_grad, relative_error
from .serialize import read_tensor, write_tensor
from .tensor import GraphConsumedError, NonFiniteError, Tensor, as_tensor, backward, build_tape, make, no_grad

__all__ = [
    "GraphConsumedError",
    "NonFiniteError",
    "Tensor",
    "as_tensor",
    "backward",
    "build_tape",
    "finite_diff_check",
    "make",
    "no_grad",
    "numerical_grad",
    "ops",
    "read_tensor",
    "relative_error",
    "write_tensor",
]
