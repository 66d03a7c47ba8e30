"""Minimal reverse-mode automatic differentiation over dense float64 tensors."""
from .tensor import DTYPE, Tape, Tensor, as_tensor, backward, current_tape
from .functional import (
    abs, add, add_channel_bias, broadcast_to, concat, conv2d, div, elementwise, grid_sample_bilinear,
    index, leaky_relu, matmul, maxpool2d, mean, mul, relu, reshape, scale, softmax, sqrt, square,
    sub, sum, transpose, unbroadcast, upsample_nearest,
)
from .gradcheck import check_gradients, numerical_grad, rel_error

__all__ = [
    "DTYPE", "Tape", "Tensor", "as_tensor", "backward", "current_tape",
    "abs", "add", "add_channel_bias", "broadcast_to", "concat", "conv2d", "div", "elementwise",
    "grid_sample_bilinear", "index", "leaky_relu", "matmul", "maxpool2d", "mean", "mul", "relu",
    "reshape", "scale", "softmax", "sqrt", "square", "sub", "sum", "transpose", "unbroadcast",
    "upsample_nearest", "check_gradients", "numerical_grad", "rel_error",
]
