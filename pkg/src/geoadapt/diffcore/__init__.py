"""Minimal reverse-mode autodiff over dense numpy tensors."""

from .gradcheck import GradCheckReport, grad_check
from .kernels import (
    avg_pool3x3,
    bilinear_resize,
    conv2d,
    grid_sample,
    gradient_reversal,
    softmax_cross_entropy_map,
)
from .tensor import (
    DomainError,
    ShapeError,
    Tensor,
    absolute,
    add,
    amin,
    backward,
    clamp,
    concat,
    constant,
    cos,
    div,
    elu,
    exp,
    grad_enabled,
    log,
    maximum,
    minimum,
    mul,
    neg,
    no_grad,
    relu,
    reshape,
    sigmoid,
    sin,
    sqrt,
    stack,
    sub,
    take,
    tmean,
    tsum,
)

__all__ = [
    "DomainError",
    "GradCheckReport",
    "ShapeError",
    "Tensor",
    "absolute",
    "add",
    "amin",
    "avg_pool3x3",
    "backward",
    "bilinear_resize",
    "clamp",
    "concat",
    "constant",
    "conv2d",
    "cos",
    "div",
    "elu",
    "exp",
    "grad_check",
    "grad_enabled",
    "gradient_reversal",
    "grid_sample",
    "log",
    "maximum",
    "minimum",
    "mul",
    "neg",
    "no_grad",
    "relu",
    "reshape",
    "sigmoid",
    "sin",
    "softmax_cross_entropy_map",
    "sqrt",
    "stack",
    "sub",
    "take",
    "tmean",
    "tsum",
]
