"""Metric correctness against independent brute-force oracles.

The oracles are deliberately naive double loops on small grids; the library
implementations must agree within 1e-9.
"""

import math

import numpy as np
import pytest

from cvcodec.data import DataError, GridTensor, compute_stats, default_latitudes, \
    default_longitudes
from cvcodec.metrics import (
    RQE_QUANTILES,
    SEDI_QUANTILES,
    bpsp_and_ratio,
    evaluate_pairs,
    latitude_weights,
    overall_mse,
    rqe,
    sedi,
    weighted_rmse,
)


def make_pair(seed, c=2, h=16, w=8, err=0.3):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(c, h, w)).astype(np.float32)
    xhat = x + err * rng.normal(size=(c, h, w)).astype(np.float32)
    lat, lon = default_latitudes(h), default_longitudes(w)
    names = tuple(f"ch{i:02d}" for i in range(c))
    return GridTensor(x, names, lat, lon), GridTensor(xhat, names, lat, lon)


class TestWeightedRmse:
    def test_brute_force_oracle(self):
        x, xhat = make_pair(0)
        c, h, w = x.shape
        cos = [math.cos(math.radians(x.lat[i])) for i in range(h)]
        cos_mean = sum(cos) / h
        for ch in range(c):
            total = 0.0
            for i in range(h):
                for j in range(w):
                    e = float(x.values[ch, i, j]) - float(xhat.values[ch, i, j])
                    total += (cos[i] / cos_mean) * e * e
            expected = math.sqrt(total / (h * w))
            assert abs(weighted_rmse(x, xhat, ch) - expected) < 1e-9

    def test_identical_fields_zero(self):
        x, _ = make_pair(1)
        assert weighted_rmse(x, x, 0) == 0.0

    def test_constant_error_returns_magnitude(self):
        """Weight normalization must make a constant error come back exactly.

        Integer-valued fields keep the +2.0 shift exactly representable in
        float32, so the error field is exactly constant.
        """
        rng = np.random.default_rng(2)
        vals = rng.integers(-8, 8, size=(2, 16, 8)).astype(np.float32)
        x = GridTensor(vals, ("a", "b"), default_latitudes(16), default_longitudes(8))
        shifted = GridTensor(vals + np.float32(2.0), x.channels, x.lat, x.lon)
        for ch in range(x.shape[0]):
            assert abs(weighted_rmse(x, shifted, ch) - 2.0) < 1e-12

    def test_equal_latitudes_give_uniform_weights(self):
        w = latitude_weights(np.full(7, 38.5))
        np.testing.assert_allclose(w, 1.0, rtol=1e-15)

    def test_polar_rows_weigh_less(self):
        w = latitude_weights(default_latitudes(16))
        assert w[0] < w[8]  # near-pole row vs near-equator row
        assert abs(w.mean() - 1.0) < 1e-15

    def test_mismatched_grids_rejected(self):
        x, _ = make_pair(3)
        y, _ = make_pair(3, h=8, w=8)
        with pytest.raises(DataError):
            weighted_rmse(x, y, 0)


class TestOverallMse:
    def test_brute_force_oracle(self):
        x, xhat = make_pair(4)
        stats = compute_stats([x])
        got = overall_mse(x, xhat, stats)
        c, h, w = x.shape
        total = 0.0
        for ch in range(c):
            m, s = stats.mean[ch], stats.std[ch]
            for i in range(h):
                for j in range(w):
                    a = (float(x.values[ch, i, j]) - m) / s
                    b = (float(xhat.values[ch, i, j]) - m) / s
                    total += (a - b) ** 2
        assert abs(got - 100.0 * total / (c * h * w)) < 1e-9

    def test_unit_error_in_normalized_space(self):
        x, _ = make_pair(5)
        stats = compute_stats([x])
        # shift every channel by exactly one std in raw units
        shifted = x.values + stats.std[:, None, None].astype(np.float32)
        xhat = GridTensor(shifted, x.channels, x.lat, x.lon)
        assert abs(overall_mse(x, xhat, stats) - 100.0) < 1e-3

    def test_identical_zero(self):
        x, _ = make_pair(6)
        stats = compute_stats([x])
        assert overall_mse(x, x, stats) == 0.0


class TestBpspRatio:
    def test_identity_product(self):
        bpsp, ratio = bpsp_and_ratio(12345, (8, 32, 64))
        assert bpsp * ratio == pytest.approx(32.0, rel=1e-12)

    def test_one_byte_per_value(self):
        bpsp, ratio = bpsp_and_ratio(8 * 32 * 64, (8, 32, 64))
        assert bpsp == pytest.approx(8.0)
        assert ratio == pytest.approx(4.0)

    def test_rejects_degenerate(self):
        with pytest.raises(DataError):
            bpsp_and_ratio(100, (0, 4, 4))
        with pytest.raises(DataError):
            bpsp_and_ratio(0, (1, 4, 4))


class TestSedi:
    def test_brute_force_oracle(self):
        x, xhat = make_pair(7, err=0.8)
        for q in SEDI_QUANTILES:
            for ch in range(x.shape[0]):
                got, _ = sedi(x, xhat, q, ch)
                ref = x.values[ch].astype(np.float64)
                rec = xhat.values[ch].astype(np.float64)
                thresh = np.quantile(ref, q)
                tp = fn = fp = tn = 0
                for i in range(ref.shape[0]):
                    for j in range(ref.shape[1]):
                        re, rc = ref[i, j] > thresh, rec[i, j] > thresh
                        tp += re and rc
                        fn += re and not rc
                        fp += rc and not re
                        tn += not re and not rc
                h = min(max(tp / (tp + fn), 1e-9), 1 - 1e-9)
                f = min(max(fp / (fp + tn), 1e-9), 1 - 1e-9)
                expected = ((math.log(f) - math.log(h) - math.log(1 - f) + math.log(1 - h))
                            / (math.log(f) + math.log(h) + math.log(1 - f) + math.log(1 - h)))
                assert abs(got - expected) < 1e-9, (q, ch)

    def test_identical_fields_approach_one(self):
        x, _ = make_pair(8)
        for q in SEDI_QUANTILES:
            score, degenerate = sedi(x, x, q, 0)
            assert degenerate
            assert score == pytest.approx(1.0, abs=1e-6)

    def test_independent_random_masks_near_zero(self):
        """Under independence, SEDI should hover around 0."""
        rng = np.random.default_rng(9)
        h, w = 64, 64
        lat, lon = default_latitudes(h), default_longitudes(w)
        scores = []
        for trial in range(20):
            a = rng.normal(size=(1, h, w)).astype(np.float32)
            b = rng.normal(size=(1, h, w)).astype(np.float32)
            ga = GridTensor(a, ("a",), lat, lon)
            gb = GridTensor(b, ("a",), lat, lon)
            scores.append(sedi(ga, gb, 0.90, 0)[0])
        assert abs(float(np.mean(scores))) < 0.1

    def test_symmetric_under_negation(self):
        """Swapping to below-threshold extremes on negated fields matches."""
        x, xhat = make_pair(10, err=0.5)
        neg_x = GridTensor(-x.values, x.channels, x.lat, x.lon)
        neg_hat = GridTensor(-xhat.values, x.channels, x.lat, x.lon)
        for q in SEDI_QUANTILES:
            direct, _ = sedi(x, xhat, q, 0)
            # extremes "below the (1-q) quantile" of the negated field are the
            # same pixel set; scoring the negated pair at 1-q with a flipped
            # comparison must reproduce the score.  Equivalent formulation:
            flipped, _ = _sedi_below(neg_x, neg_hat, 1 - q, 0)
            assert direct == pytest.approx(flipped, abs=1e-12)

    def test_constant_reference_degenerate(self):
        h, w = 8, 8
        vals = np.full((1, h, w), 3.0, dtype=np.float32)
        g = GridTensor(vals, ("a",), default_latitudes(h), default_longitudes(w))
        score, degenerate = sedi(g, g, 0.95, 0)
        assert degenerate and score == 0.0


def _sedi_below(x, xhat, quantile, channel):
    """Mirror-image SEDI: extremes are pixels below the quantile threshold."""
    ref = x.values[channel].astype(np.float64)
    rec = xhat.values[channel].astype(np.float64)
    thresh = np.quantile(ref, quantile)
    ref_ext = ref < thresh
    rec_ext = rec < thresh
    n_ext = int(ref_ext.sum())
    n_norm = ref_ext.size - n_ext
    h = min(max(float((ref_ext & rec_ext).sum() / n_ext), 1e-9), 1 - 1e-9)
    f = min(max(float((~ref_ext & rec_ext).sum() / n_norm), 1e-9), 1 - 1e-9)
    num = math.log(f) - math.log(h) - math.log1p(-f) + math.log1p(-h)
    den = math.log(f) + math.log(h) + math.log1p(-f) + math.log1p(-h)
    return num / den, False


class TestRqe:
    def test_brute_force_oracle(self):
        x, xhat = make_pair(11, err=0.5)
        for ch in range(x.shape[0]):
            got = rqe(x, xhat, ch)
            ref = sorted(float(v) for v in x.values[ch].ravel())
            rec = sorted(float(v) for v in xhat.values[ch].ravel())

            def quantile(sorted_vals, q):
                # linear interpolation on sorted order statistics
                pos = q * (len(sorted_vals) - 1)
                lo = math.floor(pos)
                hi = math.ceil(pos)
                frac = pos - lo
                return sorted_vals[lo] * (1 - frac) + sorted_vals[hi] * frac

            num = sum(quantile(rec, q) - quantile(ref, q) for q in RQE_QUANTILES)
            den = sum(abs(quantile(ref, q)) for q in RQE_QUANTILES)
            assert abs(got - num / den) < 1e-9, ch

    def test_identical_fields_zero(self):
        x, _ = make_pair(12)
        assert rqe(x, x, 0) == 0.0

    def test_shrunk_field_negative(self):
        """Shrinking toward the median underestimates the upper tail."""
        x, _ = make_pair(13)
        med = np.median(x.values[0])
        shrunk = x.values.copy()
        shrunk[0] = med + 0.5 * (shrunk[0] - med)
        xhat = GridTensor(shrunk, x.channels, x.lat, x.lon)
        assert rqe(x, xhat, 0) < 0

    def test_inflated_tails_positive(self):
        x, _ = make_pair(14)
        med = np.median(x.values[0])
        inflated = x.values.copy()
        inflated[0] = med + 1.5 * (inflated[0] - med)
        xhat = GridTensor(inflated, x.channels, x.lat, x.lon)
        assert rqe(x, xhat, 0) > 0

    def test_clipped_to_unit_range(self):
        x, _ = make_pair(15)
        huge = GridTensor(x.values * np.float32(1e6), x.channels, x.lat, x.lon)
        # inflating by 1e6 overshoots +1 and is clipped; the reverse direction
        # approaches -1 from above and stays in range
        assert rqe(x, huge, 0) == 1.0
        assert rqe(huge, x, 0) == pytest.approx(-1.0, abs=1e-5)
        assert rqe(huge, x, 0) >= -1.0


class TestEvalReport:
    def test_aggregation_and_emission(self):
        pairs = [make_pair(s) for s in range(3)]
        stats = compute_stats([p[0] for p in pairs])
        report = evaluate_pairs(pairs, stats, total_bytes=3000,
                                encode_seconds=1.0, decode_seconds=2.0)
        assert report.n_instances == 3
        # wrmse is the mean of per-instance values (sqrt before the time mean)
        expected = np.mean([weighted_rmse(x, xh, 0) for x, xh in pairs])
        assert report.wrmse["ch00"] == pytest.approx(expected, rel=1e-12)
        assert report.bpsp * report.ratio == pytest.approx(32.0, rel=1e-12)
        text = report.table_text()
        assert "ch00" in text and "wRMSE" in text
        tsv = report.tsv_text()
        assert "sedi\tch01\t0.995" in tsv

    def test_empty_rejected(self):
        stats = compute_stats([make_pair(0)[0]])
        with pytest.raises(DataError):
            evaluate_pairs([], stats, total_bytes=10)
