"""Minimal reverse-mode differentiable array substrate."""

from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    div,
    exp,
    gather_rows,
    gelu,
    gradients,
    linear,
    log,
    matmul,
    mean_,
    mul,
    neg,
    parameter,
    powc,
    reshape,
    sub,
    sum_,
    take_label,
    tanh,
    transpose,
)
from .functional import (
    cosine_similarity,
    cross_entropy,
    layer_norm,
    log_softmax,
    softmax,
    squared_distance,
)
from .optim import CosineSchedule, OptimizerState, sgd_step
from .gradcheck import check_gradients, numeric_gradient, relative_error

__all__ = [
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "add",
    "as_tensor",
    "div",
    "exp",
    "linear",
    "log",
    "mul",
    "neg",
    "powc",
    "sub",
    "tanh",
    "backward",
    "concat",
    "gather_rows",
    "gradients",
    "matmul",
    "mean_",
    "parameter",
    "reshape",
    "sum_",
    "take_label",
    "transpose",
    "cosine_similarity",
    "cross_entropy",
    "gelu",
    "layer_norm",
    "log_softmax",
    "softmax",
    "squared_distance",
    "CosineSchedule",
    "OptimizerState",
    "sgd_step",
    "check_gradients",
    "numeric_gradient",
    "relative_error",
]
