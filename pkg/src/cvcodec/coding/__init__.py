from .coder import CoderError, RangeDecoder, RangeEncoder, decode_symbols, encode_symbols
from .gaussian import (
    Alphabet,
    GaussianTableCache,
    bin_probability,
    noisy_rate_bits,
    rate_bits,
    table_estimate_bits,
)
from .prior import FactorizedGaussianPrior
from .quantize import quantize_infer, quantize_train

__all__ = [
    "Alphabet",
    "GaussianTableCache",
    "bin_probability",
    "noisy_rate_bits",
    "rate_bits",
    "table_estimate_bits",
    "CoderError",
    "RangeEncoder",
    "RangeDecoder",
    "encode_symbols",
    "decode_symbols",
    "FactorizedGaussianPrior",
    "quantize_infer",
    "quantize_train",
]
