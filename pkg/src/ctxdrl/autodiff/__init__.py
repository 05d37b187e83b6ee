"""Minimal reverse-mode differentiation over numpy arrays, plus Adam."""

from . import ops
from .adam import AdamState, adam_step
from .ops import (
    abs, add, concat, conv1d, conv2d, div, lstm_cell, matmul, mean, mul, neg,
    prod, relu, reshape, slice, softmax, stack, std, sub, sum,
)
from .tape import Tape, Tensor, backward

__all__ = [
    "AdamState", "Tape", "Tensor", "abs", "adam_step", "add", "backward", "concat",
    "conv1d", "conv2d", "div", "lstm_cell", "matmul", "mean", "mul", "neg", "ops",
    "prod", "relu", "reshape", "slice", "softmax", "stack", "std", "sub", "sum",
]
