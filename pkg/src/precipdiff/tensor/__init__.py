from .core import Tensor, as_tensor, is_grad_enabled, no_grad
from .ops import (
    adaptive_avg_pool3d,
    concat,
    conv3d,
    conv_transpose3d,
    dropout3d,
    group_norm,
    linear,
    maxpool3d,
    sigmoid,
    silu,
    square,
    tabs,
)
from .optim import AdamState, EmaState, NonFiniteGradient, adam_step, ema_update

__all__ = [
    "Tensor",
    "as_tensor",
    "no_grad",
    "is_grad_enabled",
    "adaptive_avg_pool3d",
    "concat",
    "conv3d",
    "conv_transpose3d",
    "dropout3d",
    "group_norm",
    "linear",
    "maxpool3d",
    "sigmoid",
    "silu",
    "square",
    "tabs",
    "AdamState",
    "EmaState",
    "NonFiniteGradient",
    "adam_step",
    "ema_update",
]
