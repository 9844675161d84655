"""Minimal dense-tensor engine with reverse-mode automatic differentiation."""

from mma.numerics import functional
from mma.numerics.gradcheck import check_gradients, numeric_grad, relative_error
from mma.numerics.layers import Conv2d, LayerNorm, Linear, Module, kaiming_uniform, trunc_normal
from mma.numerics.tensor import (
    ContractError,
    Parameter,
    Tape,
    Tensor,
    as_tensor,
    backward,
    default_dtype,
    get_default_dtype,
    is_grad_enabled,
    make_node,
    no_grad,
    set_default_dtype,
)

__all__ = [
    "functional",
    "check_gradients",
    "numeric_grad",
    "relative_error",
    "Conv2d",
    "LayerNorm",
    "Linear",
    "Module",
    "kaiming_uniform",
    "trunc_normal",
    "ContractError",
    "Parameter",
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "default_dtype",
    "get_default_dtype",
    "is_grad_enabled",
    "make_node",
    "no_grad",
    "set_default_dtype",
]
