"""Minimal reverse-mode autodiff with the layers the motion models need."""

from .autodiff import ShapeError, Tensor, as_tensor
from .gradcheck import check_gradients, numerical_grad, relative_error
from .ops import (
    add,
    avg_pool1d,
    batchnorm1d,
    conv1d,
    conv_transpose1d,
    linear,
    mean_time,
    relu,
    reshape,
    softmax_cross_entropy,
    squared_error,
    transpose,
)
from .optim import Adam, GradientDescent, NonFiniteGradient, StepSchedule
from .params import CheckpointError, ParamStore, load_arrays, save_arrays

__all__ = [
    "Adam",
    "CheckpointError",
    "GradientDescent",
    "NonFiniteGradient",
    "ParamStore",
    "ShapeError",
    "StepSchedule",
    "Tensor",
    "add",
    "as_tensor",
    "avg_pool1d",
    "batchnorm1d",
    "check_gradients",
    "conv1d",
    "conv_transpose1d",
    "linear",
    "load_arrays",
    "mean_time",
    "numerical_grad",
    "relative_error",
    "relu",
    "reshape",
    "save_arrays",
    "softmax_cross_entropy",
    "squared_error",
    "transpose",
]
