from .layers import (
    Conv2d,
    HardClip,
    Layer,
    LinearResample2d,
    ReLU,
    ResidualBlock,
    Sequential,
    ShapeError,
    Sigmoid,
    avgpool_weights,
    bilinear_weights,
)
from .losses import (
    BCE_EPS,
    LossValue,
    bce_logit_grad,
    bce_loss,
    combined_loss,
    huber_grad,
    huber_residual_loss,
)
from .optim import SGD
from .gradcheck import GradCheckReport, finite_diff_check
from .checkpoint import CheckpointError, load_params, params_digest, save_params

__all__ = [
    "BCE_EPS",
    "CheckpointError",
    "Conv2d",
    "GradCheckReport",
    "HardClip",
    "Layer",
    "LinearResample2d",
    "LossValue",
    "ReLU",
    "ResidualBlock",
    "SGD",
    "Sequential",
    "ShapeError",
    "Sigmoid",
    "avgpool_weights",
    "bce_logit_grad",
    "bce_loss",
    "bilinear_weights",
    "combined_loss",
    "finite_diff_check",
    "huber_grad",
    "huber_residual_loss",
    "load_params",
    "params_digest",
    "save_params",
]
