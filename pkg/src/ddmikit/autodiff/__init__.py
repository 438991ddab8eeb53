from . import functional
from .gradcheck import grad_check, grad_check_params, numerical_grad
from .nn import Conv2d, GroupNorm, Linear, Module, ResBlock
from .optim import AdamW, clip_grad_norm
from .tensor import (
    DEFAULT_DTYPE,
    BackwardError,
    BroadcastError,
    Tensor,
    absolute,
    add,
    as_tensor,
    clip,
    concat,
    div,
    exp,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    reshape,
    sqrt,
    stack,
    sub,
    transpose,
    tsum,
)

__all__ = [
    "DEFAULT_DTYPE",
    "AdamW",
    "BackwardError",
    "BroadcastError",
    "Conv2d",
    "GroupNorm",
    "Linear",
    "Module",
    "ResBlock",
    "Tensor",
    "absolute",
    "add",
    "as_tensor",
    "clip",
    "clip_grad_norm",
    "concat",
    "div",
    "exp",
    "functional",
    "grad_check",
    "grad_check_params",
    "log",
    "matmul",
    "mean",
    "mul",
    "neg",
    "no_grad",
    "numerical_grad",
    "power",
    "reshape",
    "sqrt",
    "stack",
    "sub",
    "transpose",
    "tsum",
]
