"""Evaluation metrics and report emission.

All metrics are pure float64 functions of (reference, reconstruction).
Latitude weighting uses cos(latitude) normalized to mean 1 over rows, so a
spatially constant error comes back unchanged regardless of the grid.
Thresholded extreme-event scores always derive their thresholds from the
reference field.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import DataError, GridTensor, NormStats

__all__ = [
    "weighted_rmse",
    "overall_mse",
    "bpsp_and_ratio",
    "sedi",
    "rqe",
    "SEDI_QUANTILES",
    "RQE_QUANTILES",
    "EvalReport",
    "evaluate_pairs",
]

SEDI_QUANTILES = (0.90, 0.95, 0.98, 0.995)
RQE_QUANTILES = (0.90, 0.95, 0.98, 0.99, 0.995, 0.999)
_EPS = 1e-9


def _check_grids(x: GridTensor, xhat: GridTensor) -> None:
    if x.shape != xhat.shape:
        raise DataError(f"grid shapes differ: {x.shape} vs {xhat.shape}")
    if not np.array_equal(x.lat, xhat.lat) or not np.array_equal(x.lon, xhat.lon):
        raise DataError("grids have different coordinates")


def latitude_weights(lat: np.ndarray) -> np.ndarray:
    """cos(latitude) scaled to mean exactly 1 across rows."""
    w = np.cos(np.deg2rad(np.asarray(lat, dtype=np.float64)))
    return w / w.mean()


def weighted_rmse(x: GridTensor, xhat: GridTensor, channel: int) -> float:
    """Latitude-weighted RMSE of one channel for one instance.

    sqrt of the weight-averaged squared error; callers average these values
    over instances (per-instance sqrt first, then the time mean).
    """
    _check_grids(x, xhat)
    w = latitude_weights(x.lat)[:, None]
    err2 = (x.values[channel].astype(np.float64) - xhat.values[channel].astype(np.float64)) ** 2
    return float(math.sqrt((w * err2).mean()))


def overall_mse(x: GridTensor, xhat: GridTensor, stats: NormStats) -> float:
    """Mean squared error over every channel and pixel in normalized space, x100.

    Normalization happens in float64 here (not via the float32 GridTensor
    path) so the result matches a pure-float64 oracle.
    """
    _check_grids(x, xhat)
    if x.channels != stats.channels:
        raise DataError(f"channel mismatch: grid {x.channels} vs stats {stats.channels}")
    mu = stats.mean[:, None, None]
    sd = stats.std[:, None, None]
    xn = (x.values.astype(np.float64) - mu) / sd
    xh = (xhat.values.astype(np.float64) - mu) / sd
    return float(((xn - xh) ** 2).mean() * 100.0)


def bpsp_and_ratio(n_bytes: int, dims: tuple[int, int, int],
                   bit_depth: int = 32) -> tuple[float, float]:
    """Bits per sub-pixel and compression ratio from one byte count.

    Computed from the same n_bytes, the two satisfy bpsp * ratio == bit_depth
    identically.
    """
    c, h, w = dims
    n = c * h * w
    if n == 0:
        raise DataError("bpsp_and_ratio: empty grid")
    if n_bytes <= 0:
        raise DataError("bpsp_and_ratio: nonpositive byte count")
    bpsp = 8.0 * n_bytes / n
    ratio = (n * bit_depth / 8.0) / n_bytes
    return bpsp, ratio


def sedi(x: GridTensor, xhat: GridTensor, quantile: float,
         channel: int) -> tuple[float, bool]:
    """Symmetric extremal dependence index for one channel and threshold.

    Pixels above the reference field's ``quantile`` are "extreme".  With hit
    rate H (extreme in both) and false-alarm rate F (extreme only in the
    reconstruction), the score is

        (ln F - ln H - ln(1-F) + ln(1-H)) / (ln F + ln H + ln(1-F) + ln(1-H))

    Rates are clamped to [1e-9, 1 - 1e-9]; the returned flag is True when
    clamping fired (degenerate contingency table, e.g. identical fields).
    """
    _check_grids(x, xhat)
    ref = x.values[channel].astype(np.float64)
    rec = xhat.values[channel].astype(np.float64)
    thresh = np.quantile(ref, quantile, method="linear")
    ref_ext = ref > thresh
    rec_ext = rec > thresh
    n_extreme = int(ref_ext.sum())
    n_normal = ref_ext.size - n_extreme
    if n_extreme == 0 or n_normal == 0:
        # A constant reference field has no extremes to score.
        return 0.0, True
    hit = float((ref_ext & rec_ext).sum() / n_extreme)
    false_alarm = float((~ref_ext & rec_ext).sum() / n_normal)
    degenerate = (hit <= _EPS or hit >= 1 - _EPS
                  or false_alarm <= _EPS or false_alarm >= 1 - _EPS)
    h = min(max(hit, _EPS), 1.0 - _EPS)
    f = min(max(false_alarm, _EPS), 1.0 - _EPS)
    num = math.log(f) - math.log(h) - math.log1p(-f) + math.log1p(-h)
    den = math.log(f) + math.log(h) + math.log1p(-f) + math.log1p(-h)
    return num / den, degenerate


def rqe(x: GridTensor, xhat: GridTensor, channel: int) -> float:
    """Relative quantile error over the top-quantile set.

    sum_k (q_k(rec) - q_k(ref)) / sum_k |q_k(ref)|, clipped to [-1, 1].
    Negative means the reconstruction underestimates the extremes.
    """
    _check_grids(x, xhat)
    ref = x.values[channel].astype(np.float64).ravel()
    rec = xhat.values[channel].astype(np.float64).ravel()
    qs = np.asarray(RQE_QUANTILES)
    q_ref = np.quantile(ref, qs, method="linear")
    q_rec = np.quantile(rec, qs, method="linear")
    denom = np.abs(q_ref).sum()
    if denom == 0:
        return 0.0
    return float(np.clip((q_rec - q_ref).sum() / denom, -1.0, 1.0))


@dataclass
class EvalReport:
    """Aggregated evaluation over a set of (reference, reconstruction) pairs."""

    channels: tuple[str, ...]
    n_instances: int
    wrmse: dict[str, float]
    mse_x100: float
    bpsp: float
    ratio: float
    sedi_scores: dict[str, dict[float, float]]  # channel -> quantile -> score
    rqe_scores: dict[str, float]
    encode_seconds: float = 0.0
    decode_seconds: float = 0.0
    clamp_counts: dict[str, int] = field(default_factory=dict)

    def table_text(self) -> str:
        lines = [f"instances {self.n_instances}   overall MSE x100 {self.mse_x100:.4f}   "
                 f"bpsp {self.bpsp:.4f}   ratio {self.ratio:.1f}"]
        lines.append(f"encode {self.encode_seconds:.2f}s   decode {self.decode_seconds:.2f}s   "
                     f"clamped {self.clamp_counts}")
        header = f"{'channel':10s} {'wRMSE':>10s} {'RQE':>8s}"
        header += "".join(f"{'SEDI@' + format(q, '.3g'):>11s}" for q in SEDI_QUANTILES)
        lines.append(header)
        for ch in self.channels:
            row = f"{ch:10s} {self.wrmse[ch]:10.4f} {self.rqe_scores[ch]:8.4f}"
            row += "".join(f"{self.sedi_scores[ch][q]:11.4f}" for q in SEDI_QUANTILES)
            lines.append(row)
        return "\n".join(lines) + "\n"

    def tsv_text(self) -> str:
        lines = ["metric\tchannel\tquantile\tvalue"]
        lines.append(f"mse_x100\t\t\t{self.mse_x100!r}")
        lines.append(f"bpsp\t\t\t{self.bpsp!r}")
        lines.append(f"ratio\t\t\t{self.ratio!r}")
        lines.append(f"encode_seconds\t\t\t{self.encode_seconds!r}")
        lines.append(f"decode_seconds\t\t\t{self.decode_seconds!r}")
        for ch in self.channels:
            lines.append(f"wrmse\t{ch}\t\t{self.wrmse[ch]!r}")
            lines.append(f"rqe\t{ch}\t\t{self.rqe_scores[ch]!r}")
            for q in SEDI_QUANTILES:
                lines.append(f"sedi\t{ch}\t{q}\t{self.sedi_scores[ch][q]!r}")
        return "\n".join(lines) + "\n"


def evaluate_pairs(pairs, stats: NormStats, total_bytes: int,
                   encode_seconds: float = 0.0, decode_seconds: float = 0.0,
                   clamp_counts: dict | None = None,
                   bit_depth: int = 32) -> EvalReport:
    """Aggregate metrics over (reference, reconstruction) pairs.

    ``total_bytes`` is the summed container size for all instances; bpsp and
    ratio are computed against the summed source size.
    """
    pairs = list(pairs)
    if not pairs:
        raise DataError("evaluate_pairs: no instances")
    channels = pairs[0][0].channels
    c = len(channels)
    wrmse_acc = np.zeros(c)
    mse_acc = 0.0
    sedi_acc = {ch: {q: 0.0 for q in SEDI_QUANTILES} for ch in channels}
    rqe_acc = {ch: 0.0 for ch in channels}
    for x, xhat in pairs:
        if x.channels != channels:
            raise DataError("evaluate_pairs: inconsistent channels")
        mse_acc += overall_mse(x, xhat, stats)
        for ci, ch in enumerate(channels):
            wrmse_acc[ci] += weighted_rmse(x, xhat, ci)
            rqe_acc[ch] += rqe(x, xhat, ci)
            for q in SEDI_QUANTILES:
                sedi_acc[ch][q] += sedi(x, xhat, q, ci)[0]
    n = len(pairs)
    dims = pairs[0][0].shape
    total_values = dims[0] * dims[1] * dims[2] * n
    bpsp, ratio = bpsp_and_ratio(total_bytes, (total_values, 1, 1), bit_depth)
    return EvalReport(
        channels=channels,
        n_instances=n,
        wrmse={ch: wrmse_acc[ci] / n for ci, ch in enumerate(channels)},
        mse_x100=mse_acc / n,
        bpsp=bpsp,
        ratio=ratio,
        sedi_scores={ch: {q: sedi_acc[ch][q] / n for q in SEDI_QUANTILES} for ch in channels},
        rqe_scores={ch: rqe_acc[ch] / n for ch in channels},
        encode_seconds=encode_seconds,
        decode_seconds=decode_seconds,
        clamp_counts=clamp_counts or {},
    )
