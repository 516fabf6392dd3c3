"""Reverse-mode autodiff tape, its op set, and the compiled kernels."""

from flowsfm.diffcore.kernels import using_compiled_kernels
from flowsfm.diffcore.svd3 import GAP_EPS, svd3
from flowsfm.diffcore.tape import (
    ShapeError,
    Tape,
    Tensor,
    as_tensor,
    bilinear_sample,
    broadcast_to,
    concat,
    constant,
    cos,
    exp,
    log,
    matmul,
    narrow,
    relu,
    sigmoid,
    sin,
    slice_last,
    softplus,
    sqrt,
    take,
    take2,
    take_cols,
    where,
)

__all__ = [
    "ShapeError",
    "Tape",
    "Tensor",
    "as_tensor",
    "bilinear_sample",
    "broadcast_to",
    "concat",
    "constant",
    "cos",
    "exp",
    "log",
    "matmul",
    "narrow",
    "relu",
    "sigmoid",
    "sin",
    "slice_last",
    "softplus",
    "sqrt",
    "take",
    "take2",
    "take_cols",
    "where",
    "svd3",
    "GAP_EPS",
    "using_compiled_kernels",
]
