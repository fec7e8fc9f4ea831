from .core import (
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    default_dtype,
    div,
    embedding,
    exp,
    gelu,
    get_default_dtype,
    get_tape,
    getitem,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    reshape,
    rms_norm,
    rotate_pairs,
    set_debug,
    set_default_dtype,
    silu,
    softmax,
    softmax_lastdim,
    sub,
    swapaxes,
    transpose,
    tsum,
)
from .kernels import KERNELS, scalar_kernels

__all__ = [
    "KERNELS",
    "Tape",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "concat",
    "default_dtype",
    "div",
    "embedding",
    "exp",
    "gelu",
    "get_default_dtype",
    "get_tape",
    "getitem",
    "matmul",
    "mean",
    "mul",
    "neg",
    "no_grad",
    "reshape",
    "rms_norm",
    "rotate_pairs",
    "scalar_kernels",
    "set_debug",
    "set_default_dtype",
    "silu",
    "softmax",
    "softmax_lastdim",
    "sub",
    "swapaxes",
    "transpose",
    "tsum",
]
