"""Minimal dense-tensor engine: reverse-mode autodiff plus Adam."""

from .tensor import Tensor, Tape, active_tape, as_tensor, backward, record, zero_grads
from .ops import (
    add,
    clamp,
    conv2d,
    conv_out_size,
    exp,
    leaky_relu,
    log,
    log_softmax_channels,
    mean_all,
    mul,
    neg,
    relu,
    sigmoid,
    softmax_channels,
    sub,
    sum_all,
    upsample_bilinear,
    upsample_nearest,
)
from .adam import AdamState, adam_step
from .tensorfile import read_tensor, write_tensor

__all__ = [
    "Tensor", "Tape", "active_tape", "as_tensor", "backward", "record", "zero_grads",
    "add", "sub", "mul", "neg", "relu", "leaky_relu", "sigmoid", "exp", "log", "clamp",
    "softmax_channels", "log_softmax_channels", "sum_all", "mean_all",
    "upsample_nearest", "upsample_bilinear", "conv2d", "conv_out_size",
    "AdamState", "adam_step",
    "read_tensor", "write_tensor",
]
