from . import functional
from .gradcheck import check_gradient, numerical_gradient
from .module import Conv2d, ConvTranspose2d, Linear, Module
from .tensor import NonFiniteError, Parameter, ShapeError, Tensor, backward, no_grad

__all__ = [
    "Conv2d", "ConvTranspose2d", "Linear", "Module", "NonFiniteError", "Parameter",
    "ShapeError", "Tensor", "backward", "check_gradient", "functional", "no_grad",
    "numerical_gradient",
]
