"""Parameter containers and the standard transformer building blocks."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = ["Parameter", "Module", "Linear", "LayerNorm", "Mlp", "init_rng"]


class Parameter(Tensor):
    """A trainable tensor.  Always float32."""

    def __init__(self, data):
        super().__init__(np.asarray(data, dtype=np.float32), requires_grad=True)


class Module:
    """Minimal module tree.

    Assigning a :class:`Parameter` or a :class:`Module` to an attribute
    registers it; :meth:`named_parameters` walks the tree in registration
    order, which fixes the canonical parameter order used by checkpoints and
    the optimizer.  Lists of modules are registered via :meth:`register_list`.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_list(self, name: str, modules) -> list:
        modules = list(modules)
        for i, m in enumerate(modules):
            self._children[f"{name}.{i}"] = m
        object.__setattr__(self, name, modules)
        return modules

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def init_rng(seed: int) -> np.random.Generator:
    """Generator used for weight init; Philox keeps it stable across platforms."""
    return np.random.Generator(np.random.Philox(seed))


def _kaiming(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    scale = math.sqrt(2.0 / (d_in + d_out))
    return rng.normal(0.0, scale, size=(d_in, d_out)).astype(np.float32)


class Linear(Module):
    """y = x W + b over the last axis; x may have any leading shape."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        super().__init__()
        self.d_in = d_in
        self.d_out = d_out
        self.weight = Parameter(_kaiming(rng, d_in, d_out))
        self.bias = Parameter(np.zeros(d_out, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        if x.shape[-1] != self.d_in:
            raise ValueError(f"Linear: expected last axis {self.d_in}, got {x.shape}")
        flat = ad.reshape(x, (-1, self.d_in))
        out = ad.matmul(flat, self.weight)
        out = ad.add(out, ad.broadcast_to(self.bias, out.shape))
        return ad.reshape(out, lead + (self.d_out,))


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.dim = dim
        self.eps = eps
        self.gain = Parameter(np.ones(dim, dtype=np.float32))
        self.bias = Parameter(np.zeros(dim, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, eps=self.eps)


class Mlp(Module):
    """Two linear layers with a GELU between, the usual transformer feed-forward."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, d_out: int | None = None):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, d_out if d_out is not None else dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))
