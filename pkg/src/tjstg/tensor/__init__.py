from . import ops
from .core import ContractError, ShapeError, Tape, TapeError, Tensor, as_tensor, backward
from .gradcheck import (
    NonDeterministicError,
    grad_check,
    grad_check_losses,
    grad_check_report,
    numeric_gradient,
    relative_error,
)
from .io import TensorFormatError, decode_tensor, encode_tensor, read_tensor, write_tensor
from .ops import js_divergence, kl_divergence, matmul, softmax

__all__ = [
    "ContractError",
    "NonDeterministicError",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "TensorFormatError",
    "as_tensor",
    "backward",
    "decode_tensor",
    "encode_tensor",
    "grad_check",
    "grad_check_losses",
    "grad_check_report",
    "js_divergence",
    "kl_divergence",
    "matmul",
    "numeric_gradient",
    "ops",
    "read_tensor",
    "relative_error",
    "softmax",
    "write_tensor",
]
