"""Priors for coding when no conditioning is available.

The hyper-latent z has no side channel of its own, so it is coded under a
learned per-channel factorized Gaussian.  The same machinery doubles as the
"direct" baseline for the latent y: coding y straight under the standard
normal the pretraining objective pulls it toward, which is what the prior
holds at initialization.  Measuring that baseline against the conditional
path shows how much the learned hyper-prior actually buys.
"""

from __future__ import annotations

import math

import numpy as np

from ..nn import autodiff as ad
from ..nn.autodiff import Tensor
from ..nn.layers import Module, Parameter
from .gaussian import noisy_rate_bits

__all__ = ["FactorizedGaussianPrior", "softplus_inverse"]

_SCALE_FLOOR = 1e-6


def softplus_inverse(y: float) -> float:
    return math.log(math.expm1(y))


class FactorizedGaussianPrior(Module):
    """Per-channel (location, scale) Gaussian prior over a (C, H, W) field.

    scale = softplus(raw) + 1e-6 keeps it positive.  The default
    initialization is loc 0, scale 1, i.e. a standard normal per channel.
    """

    def __init__(self, channels: int, init_scale: float = 1.0):
        super().__init__()
        self.channels = channels
        self.loc = Parameter(np.zeros(channels, dtype=np.float32))
        self.scale_raw = Parameter(
            np.full(channels, softplus_inverse(init_scale), dtype=np.float32))

    def fields(self, shape: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
        """Broadcast (mu, sigma) float64 fields for a (..., C, H, W) shape."""
        if shape[-3] != self.channels:
            raise ValueError(f"prior has {self.channels} channels, field has {shape[-3]}")
        mu = np.broadcast_to(self.loc.data.astype(np.float64)[:, None, None], shape)
        sigma_c = np.log1p(np.exp(self.scale_raw.data.astype(np.float64))) + _SCALE_FLOOR
        sigma = np.broadcast_to(sigma_c[:, None, None], shape)
        return mu, sigma

    def _param_tensors(self, shape: tuple[int, ...]) -> tuple[Tensor, Tensor]:
        c, h, w = shape[-3], shape[-2], shape[-1]
        target = shape
        mu = ad.broadcast_to(ad.reshape(self.loc, (c, 1, 1)), (c, h, w))
        sigma = ad.add(ad.softplus(self.scale_raw), _SCALE_FLOOR)
        sigma = ad.broadcast_to(ad.reshape(sigma, (c, 1, 1)), (c, h, w))
        if len(target) == 4:
            mu = ad.broadcast_to(mu, target)
            sigma = ad.broadcast_to(sigma, target)
        return mu, sigma

    def nll_bits(self, noisy: Tensor) -> Tensor:
        """Differentiable total -log2 likelihood of noise-proxied values."""
        mu, sigma = self._param_tensors(noisy.shape)
        return noisy_rate_bits(noisy, mu, sigma)
