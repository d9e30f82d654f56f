"""Minimal float64 autodiff core: tensors, ops, AdamW."""

from .functional import (
    OP_KINDS,
    add,
    bce,
    bilinear_sample_2d,
    concat,
    concat_lastdim,
    conv2d,
    forward_op,
    gelu,
    layer_norm,
    matmul,
    mean,
    mul,
    permute,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax_lastdim,
    sub,
    sum,
    take,
    transpose_2d,
    upsample_nearest2x,
)
from .optim import AdamW, OptimizerConfig, StepInfo, clip_grad_norm, cosine_lr, global_grad_norm
from .tensor import Tensor, backward, grad_enabled, no_grad

__all__ = [
    "OP_KINDS", "AdamW", "OptimizerConfig", "StepInfo", "Tensor", "add", "backward", "bce",
    "bilinear_sample_2d", "clip_grad_norm", "concat", "concat_lastdim", "conv2d", "cosine_lr",
    "forward_op", "gelu", "global_grad_norm", "grad_enabled", "layer_norm", "matmul", "mean",
    "mul", "no_grad", "permute", "relu", "reshape", "scale", "sigmoid", "softmax_lastdim",
    "sub", "sum", "take", "transpose_2d", "upsample_nearest2x",
]
