"""Minimal numpy tensor engine with reverse-mode autodiff."""

from recnet.engine.functional import (
    Conv2dSpec,
    ConvTranspose2dSpec,
    batchnorm2d,
    conv2d,
    conv_transpose2d,
    dense,
    image_gradients,
    prelu,
    sigmoid,
)
from recnet.engine.gradcheck import gradcheck, numerical_gradient
from recnet.engine.optim import Adam, AdamState, adam_step
from recnet.engine.tensor import Tensor, concat, no_grad, parameter

__all__ = [
    "Adam",
    "AdamState",
    "Conv2dSpec",
    "ConvTranspose2dSpec",
    "Tensor",
    "adam_step",
    "batchnorm2d",
    "concat",
    "conv2d",
    "conv_transpose2d",
    "dense",
    "gradcheck",
    "image_gradients",
    "no_grad",
    "numerical_gradient",
    "parameter",
    "prelu",
    "sigmoid",
]
