"""Minimal reverse-mode autodiff with the operators the reconstruction networks need."""
from . import ops
from .ops import (
    affine,
    backproject,
    bias_add,
    bilinear_upsample2,
    concat,
    conv2d,
    conv2d_stride2,
    conv_transpose2d_stride2,
    l1_loss,
    max_pool2,
    pad2d,
    prelu,
    project,
    relu,
)
from .optim import ParamStore
from .tensor import AutodiffStateError, ShapeError, Tensor, as_tensor, grad_enabled, no_grad, parameter

__all__ = [
    "AutodiffStateError",
    "ParamStore",
    "ShapeError",
    "Tensor",
    "affine",
    "as_tensor",
    "backproject",
    "bias_add",
    "bilinear_upsample2",
    "concat",
    "grad_enabled",
    "conv2d",
    "conv2d_stride2",
    "conv_transpose2d_stride2",
    "l1_loss",
    "max_pool2",
    "no_grad",
    "ops",
    "pad2d",
    "parameter",
    "prelu",
    "project",
    "relu",
]
