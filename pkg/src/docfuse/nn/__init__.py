"""Minimal numpy layer library with hand-derived gradients."""

from . import checkpoint, functional
from .gradcheck import numerical_gradient, relative_error
from .init import child_rng, he_init, make_rng
from .layers import (
    BatchNorm,
    Conv1d,
    Conv2d,
    Dense,
    DepthwiseConv2d,
    Dropout,
    GlobalAvgPool2d,
    Layer,
    MaxOverTime,
    MaxPool1d,
    PointwiseConv2d,
    ReLU,
    Sequential,
    SoftmaxCrossEntropy,
)
from .optim import SgdMomentum

__all__ = [
    "BatchNorm", "Conv1d", "Conv2d", "Dense", "DepthwiseConv2d", "Dropout",
    "GlobalAvgPool2d", "Layer", "MaxOverTime", "MaxPool1d", "PointwiseConv2d",
    "ReLU", "Sequential", "SgdMomentum", "SoftmaxCrossEntropy", "checkpoint",
    "child_rng", "functional", "he_init", "make_rng", "numerical_gradient",
    "relative_error",
]
