"""Minimal differentiable compute for the user models."""

from .autodiff import (
    Tensor, bce_with_logits, concat, gather, layer_norm, log_softmax,
    no_grad, rows, softmax,
)
from .gradcheck import grad_check
from .layers import LstmCell, Mlp, ShapeError, TransformerLayer, fan_in_uniform, one_hot
from .optim import Adam, TrainingDiverged
from .params import ParamStore

__all__ = [
    "Tensor", "ParamStore", "Mlp", "LstmCell", "TransformerLayer",
    "Adam", "TrainingDiverged", "ShapeError",
    "softmax", "log_softmax", "layer_norm", "concat", "rows", "gather",
    "bce_with_logits", "no_grad", "grad_check", "fan_in_uniform", "one_hot",
]
