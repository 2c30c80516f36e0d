"""Minimal reverse-mode tensor library with an Adam optimizer."""
from . import backend
from .optim import Adam, AdamState
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    avg_pool2d,
    backward,
    bce_with_logits,
    concat,
    conv2d,
    dense,
    flatten,
    grad_enabled,
    layer_norm,
    matmul,
    max_pool2d,
    mean,
    mul,
    no_grad,
    pad_spatial,
    relu,
    reshape,
    sigmoid,
    softmax,
    sum_,
    transpose,
)

__all__ = [
    "Adam",
    "AdamState",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "add",
    "avg_pool2d",
    "backend",
    "backward",
    "bce_with_logits",
    "concat",
    "conv2d",
    "dense",
    "flatten",
    "grad_enabled",
    "layer_norm",
    "matmul",
    "max_pool2d",
    "mean",
    "mul",
    "no_grad",
    "pad_spatial",
    "relu",
    "reshape",
    "sigmoid",
    "softmax",
    "sum_",
    "transpose",
]
