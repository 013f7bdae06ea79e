"""Minimal dense-tensor arithmetic with reverse-mode automatic differentiation."""

from . import nn, ops
from .graph import Graph, GradCheckReport, NodeRecord, backward, forward, grad_check
from .params import CheckpointError, ParamSet, load_params, save_params
from .tensor import ShapeError, Tensor, as_tensor, default_dtype, no_grad, precision, set_default_dtype, tensor

__all__ = [
    "Graph",
    "GradCheckReport",
    "NodeRecord",
    "ParamSet",
    "CheckpointError",
    "ShapeError",
    "Tensor",
    "as_tensor",
    "backward",
    "default_dtype",
    "forward",
    "grad_check",
    "load_params",
    "nn",
    "no_grad",
    "ops",
    "precision",
    "save_params",
    "set_default_dtype",
    "tensor",
]
