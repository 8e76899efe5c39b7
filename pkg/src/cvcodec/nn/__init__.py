from . import autodiff
from .autodiff import Tape, Tensor, gradcheck, tensor
from .layers import LayerNorm, Linear, Mlp, Module, Parameter, init_rng

__all__ = [
    "autodiff",
    "Tape",
    "Tensor",
    "tensor",
    "gradcheck",
    "Module",
    "Parameter",
    "Linear",
    "LayerNorm",
    "Mlp",
    "init_rng",
]
