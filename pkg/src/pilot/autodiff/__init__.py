"""Reverse-mode automatic differentiation over dense numpy arrays."""

from .ops import (
    acos,
    add,
    batch_norm2d,
    clip,
    concat,
    conv2d,
    cos,
    det2x2,
    div,
    exp,
    inverse2x2,
    layer_norm,
    log,
    matmul,
    max_pool2d,
    mean,
    mul,
    neg,
    relu,
    reshape,
    sigmoid,
    sin,
    slice,
    softmax,
    sub,
    sum,
    trace,
    transpose,
)
from .tensor import ShapeError, SingularMatrixError, Tensor, as_tensor, is_grad_enabled, no_grad, topological_order

__all__ = [
    "Tensor", "ShapeError", "SingularMatrixError", "as_tensor", "no_grad", "is_grad_enabled",
    "topological_order", "acos", "add", "batch_norm2d", "clip", "concat", "conv2d", "cos", "det2x2",
    "div", "exp", "inverse2x2", "layer_norm", "log", "matmul", "max_pool2d", "mean", "mul", "neg",
    "relu", "reshape", "sigmoid", "sin", "slice", "softmax", "sub", "sum", "trace", "transpose",
]
