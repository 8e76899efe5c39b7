"""Quantization: additive-noise proxy for training, rounding for inference."""

from __future__ import annotations

import numpy as np

from ..nn import autodiff as ad
from ..nn.autodiff import Tensor

__all__ = ["quantize_train", "quantize_infer"]


def quantize_train(v: Tensor, rng: np.random.Generator) -> Tensor:
    """v + u with u ~ U(-1/2, 1/2) i.i.d.; the gradient passes straight through.

    The noise is a constant w.r.t. the tape, so d(out)/d(v) is exactly 1.
    """
    u = rng.uniform(-0.5, 0.5, size=v.shape).astype(v.data.dtype)
    return ad.add(v, Tensor(u))


def quantize_infer(v: np.ndarray, s_min: int, s_max: int) -> tuple[np.ndarray, int]:
    """Round half-to-even, clamp to [s_min, s_max], count clamp events."""
    rounded = np.rint(np.asarray(v, dtype=np.float64))
    clamped = np.clip(rounded, s_min, s_max)
    n_clamped = int((rounded != clamped).sum())
    return clamped.astype(np.int32), n_clamped
