from .gradcheck import GradCheckReport, grad_check
from .layers import (GRU, MLP, UGRU, Attention, LaneletAggregator, Linear, SpatialAttention,
                     dot_attention, gru_forward, mlp_forward, spatial_attention, ugru_encode)
from .optim import NonFiniteGradient, adamw_step, clip_grad_norm, step_decay_lr
from .params import ParamStore
from .tensor import Tensor, no_grad

__all__ = [
    "Attention", "GRU", "GradCheckReport", "LaneletAggregator", "Linear", "MLP", "NonFiniteGradient",
    "ParamStore", "SpatialAttention", "Tensor", "UGRU", "adamw_step", "clip_grad_norm",
    "dot_attention", "grad_check", "gru_forward", "mlp_forward", "no_grad", "spatial_attention",
    "step_decay_lr", "ugru_encode",
]
