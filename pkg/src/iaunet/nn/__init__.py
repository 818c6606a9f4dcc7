"""Numpy reverse-mode autodiff core with compiled hot kernels."""

from . import functional
from .kernels import BACKEND
from .layers import (BatchNorm2d, Conv2d, ConvBNReLU, ConvTranspose2x, DoubleConv, Linear,
                     Module)
from .tensor import Node, Parameter, Tape, Tensor, backward, is_grad_enabled, no_grad

__all__ = [
    "BACKEND", "BatchNorm2d", "Conv2d", "ConvBNReLU", "ConvTranspose2x", "DoubleConv",
    "Linear", "Module", "Node", "Parameter", "Tape", "Tensor", "backward", "functional",
    "is_grad_enabled", "no_grad",
]
