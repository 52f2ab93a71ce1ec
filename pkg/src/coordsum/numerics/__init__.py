"""Tensor arithmetic with reverse-mode autodiff, deterministic RNG, grad checking."""

from .gradcheck import GradCheckReport, grad_check
from .rng import RngState, derive_seed
from .tensor import (
    ShapeError,
    Tape,
    Tensor,
    add,
    div,
    embedding_lookup,
    gather_last,
    gelu,
    layer_norm,
    log_softmax,
    masked_fill,
    matmul,
    mul,
    relu,
    reshape,
    softmax,
    stack,
    sub,
    take,
    tensor_sum,
    transpose,
)

__all__ = [
    "GradCheckReport",
    "grad_check",
    "RngState",
    "derive_seed",
    "ShapeError",
    "Tape",
    "Tensor",
    "add",
    "div",
    "embedding_lookup",
    "gather_last",
    "gelu",
    "layer_norm",
    "log_softmax",
    "masked_fill",
    "matmul",
    "mul",
    "relu",
    "reshape",
    "softmax",
    "stack",
    "sub",
    "take",
    "tensor_sum",
    "transpose",
]
