"""Small reverse-mode autodiff engine and the networks built on it."""

from .layers import SGD, Conv2d, Linear, Module, ScEncoder, UNet3, sgd_step
from .tensor import Tensor, as_tensor

__all__ = ["SGD", "Conv2d", "Linear", "Module", "ScEncoder", "Tensor", "UNet3", "as_tensor", "sgd_step"]
