"""Noise-convolved Gaussian bin likelihoods and integer CDF tables.

The probability that a quantized value equals integer s under N(mu, sigma^2)
convolved with U(-1/2, 1/2) is Phi((s + 1/2 - mu)/sigma) - Phi((s - 1/2 -
mu)/sigma).  This file provides that likelihood three ways:

* float64 numpy, for estimates and tests;
* on the autodiff tape, for the differentiable rate term (with noisy
  values in place of integers);
* as integer cumulative-frequency tables for the range coder.

Coder tables must be identical on the encode and decode side even though
the decoder reconstructs (mu, sigma) through its own floating-point path,
so (mu, sigma) are first snapped to fixed grids: mu to steps of 1/256,
sigma to a 64-level log grid.  Everything after the snapped values is
integer arithmetic; see FORMATS.md for the normative description.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special as _sp

from ..nn import autodiff as ad
from ..nn.autodiff import Tensor

__all__ = [
    "Alphabet",
    "MIN_PROB",
    "SIGMA_MIN",
    "SIGMA_MAX",
    "SIGMA_LEVELS",
    "MU_STEPS",
    "bin_probability",
    "rate_bits",
    "noisy_rate_bits",
    "snap_mu",
    "snap_sigma",
    "sigma_level_value",
    "GaussianTableCache",
    "build_table_reference",
    "table_estimate_bits",
]

MIN_PROB = 2.0**-16
SIGMA_MIN = 0.04
SIGMA_MAX = 256.0
SIGMA_LEVELS = 64
MU_STEPS = 256  # mu snapped to multiples of 1/256
_CDF_PRECISION = 1 << 24  # intermediate integer CDF resolution
TOTAL = 1 << 16  # coder total frequency
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_LOG_SIGMA_SPAN = math.log(SIGMA_MAX) - math.log(SIGMA_MIN)


@dataclass(frozen=True)
class Alphabet:
    """Closed integer symbol range for the coder."""

    s_min: int = -128
    s_max: int = 127

    def __post_init__(self):
        if self.s_max <= self.s_min:
            raise ValueError(f"empty alphabet [{self.s_min}, {self.s_max}]")

    @property
    def size(self) -> int:
        return self.s_max - self.s_min + 1

    def index_of(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.int64) - self.s_min

    def contains(self, values: np.ndarray) -> bool:
        v = np.asarray(values)
        return bool(np.all(v >= self.s_min) & np.all(v <= self.s_max))


def bin_probability(y: np.ndarray, mu: np.ndarray, sigma: np.ndarray,
                    floor: bool = True) -> np.ndarray:
    """Probability that a N(mu, sigma^2) draw lands in [y - 1/2, y + 1/2).

    Equivalently: the density of the noise-relaxed latent (a Gaussian plus
    U(-1/2, 1/2)) evaluated at y.  Elementwise in float64.
    """
    y = np.asarray(y, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    upper = _sp.ndtr((y + 0.5 - mu) / sigma)
    lower = _sp.ndtr((y - 0.5 - mu) / sigma)
    p = upper - lower
    if floor:
        p = np.maximum(p, MIN_PROB)
    return p


def rate_bits(y: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> float:
    """Sum of -log2 p over all elements; the ideal-coder estimate."""
    return float(-np.log2(bin_probability(y, mu, sigma)).sum())


def noisy_rate_bits(y_noisy: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    """Differentiable rate term: -log2 likelihood of noise-proxied values.

    Same bin expression as :func:`bin_probability` with the noisy real-valued
    surrogate in place of the integer, built from tape ops; probabilities are
    floored at MIN_PROB (gradient is zero in the floored region).
    """
    inv = ad.div(1.0, sigma)

    def phi(t: Tensor) -> Tensor:
        return ad.mul(ad.add(ad.erf(ad.mul(t, _INV_SQRT2)), 1.0), 0.5)

    upper = phi(ad.mul(ad.sub(ad.add(y_noisy, 0.5), mu), inv))
    lower = phi(ad.mul(ad.sub(ad.sub(y_noisy, 0.5), mu), inv))
    p = ad.clamp(ad.sub(upper, lower), lo=MIN_PROB)
    return ad.mul(ad.tsum(ad.log(p)), -1.0 / math.log(2.0))


# ---------------------------------------------------------------------------
# Fixed coding grids


def snap_mu(mu: np.ndarray, alphabet: Alphabet) -> np.ndarray:
    """Snap means to integer multiples of 1/256, clamped near the alphabet.

    Returns the integer numerators m (mu_q = m / 256).  Means more than one
    unit outside the alphabet produce saturated tables anyway, so m is
    clamped there to keep the table cache bounded.
    """
    m = np.rint(np.asarray(mu, dtype=np.float64) * MU_STEPS)
    return np.clip(m, (alphabet.s_min - 1) * MU_STEPS,
                   (alphabet.s_max + 1) * MU_STEPS).astype(np.int64)


def snap_sigma(sigma: np.ndarray) -> np.ndarray:
    """Snap scales to the 64-level log grid; returns level indices."""
    s = np.clip(np.asarray(sigma, dtype=np.float64), SIGMA_MIN, SIGMA_MAX)
    j = np.rint(np.log(s / SIGMA_MIN) / _LOG_SIGMA_SPAN * (SIGMA_LEVELS - 1))
    return np.clip(j, 0, SIGMA_LEVELS - 1).astype(np.int64)


def sigma_level_value(j) -> np.ndarray:
    """Representative sigma of level j."""
    j = np.asarray(j, dtype=np.float64)
    return SIGMA_MIN * np.exp(j / (SIGMA_LEVELS - 1) * _LOG_SIGMA_SPAN)


def _rebalance(freq: np.ndarray) -> np.ndarray:
    """Adjust integer frequencies so they sum to TOTAL with every entry >= 1.

    Deterministic: raise zeros to 1 first, then surplus goes to the largest
    bin and deficit is taken from the largest bins (first index on ties),
    never below 1.
    """
    freq = np.maximum(freq.astype(np.int64), 1)
    diff = TOTAL - int(freq.sum())
    if diff > 0:
        freq[int(np.argmax(freq))] += diff
    while diff < 0:
        i = int(np.argmax(freq))
        take = min(-diff, int(freq[i]) - 1)
        if take == 0:
            raise AssertionError("cannot rebalance CDF table")  # unreachable: sum >= size
        freq[i] -= take
        diff += take
    return freq


def build_table(m: int, j: int, alphabet: Alphabet) -> np.ndarray:
    """Cumulative-frequency table for snapped parameters (m, j).

    Returns uint32 array of length alphabet.size + 1: cum[0] == 0,
    cum[-1] == 2^16, strictly increasing.  Tail mass outside the alphabet is
    folded into the end symbols.
    """
    mu = m / MU_STEPS
    sigma = float(sigma_level_value(j))
    edges = np.arange(alphabet.s_min, alphabet.s_max + 1, dtype=np.float64) + 0.5
    inner = np.rint(_sp.ndtr((edges[:-1] - mu) / sigma) * _CDF_PRECISION).astype(np.int64)
    cdf24 = np.concatenate(([0], inner, [_CDF_PRECISION]))
    cdf24 = np.maximum.accumulate(cdf24)  # guard against rounding inversions
    freq = _rebalance((cdf24[1:] - cdf24[:-1]) >> 8)
    cum = np.zeros(alphabet.size + 1, dtype=np.uint32)
    np.cumsum(freq, out=cum[1:])
    return cum


def build_table_reference(m: int, j: int, alphabet: Alphabet) -> np.ndarray:
    """Independent scalar-arithmetic implementation of :func:`build_table`.

    Uses math.erfc instead of scipy and plain Python loops; exists so tests
    can assert the two derivations agree bit for bit (the table derivation
    is part of the bitstream contract).
    """
    mu = m / MU_STEPS
    sigma = SIGMA_MIN * math.exp(j / (SIGMA_LEVELS - 1) * _LOG_SIGMA_SPAN)
    n = alphabet.size
    cdf24 = [0] * (n + 1)
    cdf24[n] = _CDF_PRECISION
    for k in range(1, n):
        edge = alphabet.s_min + k - 0.5
        phi = 0.5 * math.erfc(-((edge - mu) / sigma) * _INV_SQRT2)
        val = int(_round_half_even(phi * _CDF_PRECISION))
        cdf24[k] = max(val, cdf24[k - 1])
    freqs = [(cdf24[k + 1] - cdf24[k]) >> 8 for k in range(n)]
    freqs = [max(f, 1) for f in freqs]
    diff = TOTAL - sum(freqs)
    if diff > 0:
        freqs[freqs.index(max(freqs))] += diff
    while diff < 0:
        i = freqs.index(max(freqs))
        take = min(-diff, freqs[i] - 1)
        freqs[i] -= take
        diff += take
    cum = [0]
    for f in freqs:
        cum.append(cum[-1] + f)
    return np.asarray(cum, dtype=np.uint32)


def _round_half_even(x: float) -> int:
    f = math.floor(x)
    r = x - f
    if r > 0.5 or (r == 0.5 and f % 2 == 1):
        return f + 1
    return f


class GaussianTableCache:
    """Builds and caches coder tables keyed by snapped (m, j).

    One cache serves both encoder and decoder; tables depend only on the
    snapped parameters, never on which side asks.
    """

    def __init__(self, alphabet: Alphabet | None = None):
        self.alphabet = alphabet or Alphabet()
        self._tables: dict[tuple[int, int], np.ndarray] = {}

    def keys_for(self, mu: np.ndarray, sigma: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return snap_mu(mu, self.alphabet), snap_sigma(sigma)

    def table(self, m: int, j: int) -> np.ndarray:
        key = (int(m), int(j))
        tab = self._tables.get(key)
        if tab is None:
            tab = build_table(key[0], key[1], self.alphabet)
            self._tables[key] = tab
        return tab

    def __len__(self) -> int:
        return len(self._tables)


def table_estimate_bits(values: np.ndarray, m: np.ndarray, j: np.ndarray,
                        cache: GaussianTableCache) -> float:
    """Sum of -log2(freq/TOTAL) under the quantized tables.

    This is the estimate the coder-overhead bound is stated against: it uses
    exactly the integer frequencies the coder will use.
    """
    alphabet = cache.alphabet
    idx = alphabet.index_of(values)
    total_bits = 0.0
    for v, mi, ji in zip(idx.ravel(), np.asarray(m).ravel(), np.asarray(j).ravel()):
        cum = cache.table(int(mi), int(ji))
        f = int(cum[v + 1]) - int(cum[v])
        total_bits -= math.log2(f / TOTAL)
    return total_bits
