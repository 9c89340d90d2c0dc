"""Minimal dense-tensor library with reverse-mode automatic differentiation."""

from .gradcheck import finite_difference_check, relative_error
from .ops import (
    add,
    avgpool_global,
    batchnorm2d,
    conv2d,
    dense,
    div,
    dot,
    flatten,
    maxpool2x2,
    mean,
    mul,
    neg,
    primitive_forward,
    relu,
    reshape,
    residual_add,
    row_dot,
    row_norm,
    softmax_cross_entropy,
    sub,
)
from .ops import sum
from .ops import sum as tsum
from .optim import SGD, Parameter, sgd_step
from .tensor import (
    Record,
    Tape,
    Tensor,
    backward,
    current_tape,
    get_default_dtype,
    grad_of,
    no_grad,
    precision,
    set_default_dtype,
)

__all__ = [
    "Parameter", "Record", "SGD", "Tape", "Tensor", "add", "avgpool_global", "backward",
    "batchnorm2d", "conv2d", "current_tape", "dense", "div", "dot", "finite_difference_check",
    "flatten", "get_default_dtype", "grad_of", "maxpool2x2", "mean", "mul", "neg", "no_grad",
    "precision", "primitive_forward", "relative_error", "relu", "reshape", "residual_add",
    "row_dot", "row_norm", "set_default_dtype", "sgd_step", "softmax_cross_entropy", "sub", "sum", "tsum",
]
