"""Minimal neural-network core with double-backprop support."""

from .model import (
    Batch,
    Conv2d,
    Dense,
    ModelSpec,
    accuracy,
    batch_loss,
    forward,
    grad_input_of_objective,
    grad_params,
    init_params,
    loss_ce,
    value_and_input_grad,
)
from .params import LayerSlot, ParamVector, load_params, save_params

__all__ = [
    "Batch",
    "Conv2d",
    "Dense",
    "LayerSlot",
    "ModelSpec",
    "ParamVector",
    "accuracy",
    "batch_loss",
    "forward",
    "grad_input_of_objective",
    "grad_params",
    "init_params",
    "load_params",
    "loss_ce",
    "save_params",
    "value_and_input_grad",
]
