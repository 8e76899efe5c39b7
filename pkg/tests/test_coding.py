"""Quantization, Gaussian bin likelihoods, CDF tables, and the range coder."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvcodec.coding import (
    Alphabet,
    CoderError,
    FactorizedGaussianPrior,
    GaussianTableCache,
    bin_probability,
    decode_symbols,
    encode_symbols,
    noisy_rate_bits,
    quantize_infer,
    quantize_train,
    rate_bits,
    table_estimate_bits,
)
from cvcodec.coding.gaussian import (
    MIN_PROB,
    SIGMA_LEVELS,
    TOTAL,
    build_table,
    build_table_reference,
    sigma_level_value,
    snap_mu,
    snap_sigma,
)
from cvcodec.nn.autodiff import Tape, Tensor, gradcheck, tensor


class TestQuantizeTrain:
    def test_noise_within_half(self):
        rng = np.random.default_rng(0)
        v = tensor(np.zeros(10000))
        out = quantize_train(v, rng)
        d = out.data - v.data
        assert (d >= -0.5).all() and (d < 0.5).all()

    def test_noise_mean_near_zero(self):
        rng = np.random.default_rng(1)
        n = 10**6
        d = quantize_train(tensor(np.zeros(n)), rng).data
        se = 1.0 / math.sqrt(12 * n)  # std of U(-1/2,1/2) is 1/sqrt(12)
        assert abs(d.mean()) < 3 * se

    def test_gradient_passes_through(self):
        rng = np.random.default_rng(2)
        v = Tensor(np.zeros(5, dtype=np.float32), requires_grad=True)
        with Tape() as tape:
            out = quantize_train(v, rng)
            from cvcodec.nn import autodiff as ad
            tape.backward(ad.tsum(out))
        np.testing.assert_array_equal(v.grad, np.ones(5, dtype=np.float32))


class TestQuantizeInfer:
    def test_half_to_even(self):
        out, n = quantize_infer(np.array([0.5, 1.5, 2.5, -0.5, -1.5, -2.3]), -128, 127)
        np.testing.assert_array_equal(out, [0, 2, 2, 0, -2, -2])
        assert n == 0

    def test_clamp_counted(self):
        out, n = quantize_infer(np.array([300.0, -300.0, 5.0]), -128, 127)
        np.testing.assert_array_equal(out, [127, -128, 5])
        assert n == 2


class TestBinProbability:
    def test_reference_value(self):
        # Phi(0.5) - Phi(-0.5)
        got = float(bin_probability(np.array(0), np.array(0.0), np.array(1.0)))
        assert got == pytest.approx(0.3829249225480261, abs=1e-12)

    def test_tiny_sigma_concentrates(self):
        got = float(bin_probability(np.array(3), np.array(3.0), np.array(1e-6)))
        assert got == pytest.approx(1.0, abs=1e-12)

    def test_floor_applies(self):
        got = float(bin_probability(np.array(100), np.array(0.0), np.array(0.1)))
        assert got == MIN_PROB

    def test_monte_carlo_agreement(self):
        """Module-scale check; the acceptance suite runs the full grid."""
        rng = np.random.default_rng(3)
        n = 200_000
        for mu, sigma, y in [(0.3, 1.0, 0), (-1.2, 0.7, -1), (0.0, 3.0, 2)]:
            samples = rng.normal(mu, sigma, size=n)
            hits = ((samples >= y - 0.5) & (samples < y + 0.5)).mean()
            p = float(bin_probability(np.array(y), np.array(mu), np.array(sigma)))
            se = math.sqrt(p * (1 - p) / n)
            assert abs(hits - p) < 3 * se, (mu, sigma, y)

    def test_sums_to_one_over_wide_alphabet(self):
        ys = np.arange(-128, 128)
        p = bin_probability(ys, np.full_like(ys, 0.4, dtype=float),
                            np.full_like(ys, 2.0, dtype=float), floor=False)
        assert p.sum() == pytest.approx(1.0, abs=1e-9)
        narrow = p[118:]  # clipped alphabet loses tail mass
        assert narrow.sum() < 1.0


class TestRateBits:
    def test_half_probability_is_one_bit(self):
        # mu on the bin edge, tiny sigma: exactly half the mass in the bin
        assert rate_bits(np.array(0), np.array(0.5), np.array(0.01)) == pytest.approx(1.0, abs=1e-9)

    def test_certain_symbol_is_zero_bits(self):
        assert rate_bits(np.array(2), np.array(2.0), np.array(1e-5)) == pytest.approx(0.0, abs=1e-9)

    def test_noisy_rate_matches_exact_at_integers(self):
        rng = np.random.default_rng(4)
        y = rng.integers(-5, 6, size=(3, 4)).astype(np.float64)
        mu = tensor(rng.normal(size=(3, 4)), dtype=np.float64)
        sigma = tensor(rng.uniform(0.5, 2.0, size=(3, 4)), dtype=np.float64)
        got = noisy_rate_bits(tensor(y, dtype=np.float64), mu, sigma)
        want = rate_bits(y, mu.data, sigma.data)
        assert float(got.data) == pytest.approx(want, rel=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(5)
        y = tensor(rng.normal(size=(2, 3)), dtype=np.float64)
        mu = tensor(rng.normal(size=(2, 3)), dtype=np.float64)
        sigma = tensor(rng.uniform(0.5, 2.0, size=(2, 3)), dtype=np.float64)
        assert gradcheck(lambda a, b, c: noisy_rate_bits(a, b, c), [y, mu, sigma]) < 1e-4


class TestParameterSnapping:
    def test_mu_grid(self):
        alphabet = Alphabet()
        m = snap_mu(np.array([0.0, 0.1, -0.25, 300.0]), alphabet)
        np.testing.assert_array_equal(m[:3], [0, 26, -64])
        assert m[3] == 128 * 256  # clamped one unit past the alphabet edge

    def test_sigma_levels_cover_range(self):
        j = snap_sigma(np.array([1e-9, 0.04, 1.0, 256.0, 1e6]))
        assert j[0] == 0 and j[1] == 0
        assert j[3] == SIGMA_LEVELS - 1 and j[4] == SIGMA_LEVELS - 1
        assert 0 < j[2] < SIGMA_LEVELS - 1

    def test_level_values_monotone(self):
        vals = sigma_level_value(np.arange(SIGMA_LEVELS))
        assert (np.diff(vals) > 0).all()
        assert vals[0] == pytest.approx(0.04) and vals[-1] == pytest.approx(256.0)

    def test_snap_is_idempotent(self):
        """Recovering sigma from its level and snapping again is a fixpoint."""
        j = np.arange(SIGMA_LEVELS)
        np.testing.assert_array_equal(snap_sigma(sigma_level_value(j)), j)


class TestCdfTables:
    def test_structure(self):
        alphabet = Alphabet()
        for m, j in [(0, 30), (256, 0), (-1000, 63), (40000, 10)]:
            cum = build_table(m, j, alphabet)
            assert len(cum) == alphabet.size + 1
            assert cum[0] == 0 and cum[-1] == TOTAL
            assert (np.diff(cum.astype(np.int64)) >= 1).all()

    def test_concentrated_table_puts_mass_on_mean(self):
        alphabet = Alphabet()
        cum = build_table(5 * 256, 0, alphabet)  # mu=5, sharpest sigma
        freq = np.diff(cum.astype(np.int64))
        assert np.argmax(freq) == alphabet.index_of(np.array(5))

    def test_out_of_range_mean_saturates_edge(self):
        alphabet = Alphabet()
        cum = build_table(snap_mu(np.array(10000.0), alphabet), 0, alphabet)
        freq = np.diff(cum.astype(np.int64))
        assert np.argmax(freq) == alphabet.size - 1

    def test_dual_implementation_agreement(self):
        """Vectorized scipy path vs scalar math path, bit for bit."""
        alphabet = Alphabet()
        rng = np.random.default_rng(6)
        for _ in range(40):
            m = int(rng.integers(-129 * 256, 129 * 256))
            j = int(rng.integers(0, SIGMA_LEVELS))
            a = build_table(m, j, alphabet)
            b = build_table_reference(m, j, alphabet)
            np.testing.assert_array_equal(a, b, err_msg=f"(m={m}, j={j})")

    def test_cache_reuses_tables(self):
        cache = GaussianTableCache()
        t1 = cache.table(0, 32)
        t2 = cache.table(0, 32)
        assert t1 is t2
        assert len(cache) == 1


class TestRangeCoder:
    def gaussian_stream(self, seed, n):
        """Random symbols with per-position Gaussian tables."""
        rng = np.random.default_rng(seed)
        cache = GaussianTableCache()
        mu = rng.uniform(-20, 20, size=n)
        sigma = np.exp(rng.uniform(np.log(0.05), np.log(30), size=n))
        values = np.clip(np.rint(rng.normal(mu, sigma)), -128, 127).astype(np.int64)
        m, j = cache.keys_for(mu, sigma)
        tables = [cache.table(m[i], j[i]) for i in range(n)]
        indices = cache.alphabet.index_of(values)
        return indices, tables, cache, m, j, values

    def test_roundtrip(self):
        indices, tables, *_ = self.gaussian_stream(7, 2000)
        blob = encode_symbols(indices, lambda i: tables[i])
        back = decode_symbols(blob, len(indices), lambda i: tables[i])
        np.testing.assert_array_equal(back, indices)

    def test_overhead_bound(self):
        indices, tables, cache, m, j, values = self.gaussian_stream(8, 10_000)
        blob = encode_symbols(indices, lambda i: tables[i])
        est = table_estimate_bits(values, m, j, cache)
        realized = 8 * len(blob)
        assert est - 1 <= realized <= est + 32

    def test_empty_stream(self):
        blob = encode_symbols([], lambda i: None)
        assert len(blob) <= 8
        assert decode_symbols(blob, 0, lambda i: None).size == 0

    def test_uniform_binary_hits_entropy(self):
        cum = np.array([0, TOTAL // 2, TOTAL], dtype=np.uint32)
        rng = np.random.default_rng(9)
        bits = rng.integers(0, 2, size=1000)
        blob = encode_symbols(bits, lambda i: cum)
        assert 125 <= len(blob) <= 125 + 8

    def test_skewed_source_compresses(self):
        cum = np.array([0, TOTAL - 256, TOTAL], dtype=np.uint32)
        syms = np.zeros(1000, dtype=np.int64)
        blob = encode_symbols(syms, lambda i: cum)
        # -log2(65280/65536) ~ 0.0056 bits/symbol -> ~1 byte total
        assert len(blob) < 16

    def test_symbol_out_of_alphabet_rejected(self):
        cum = np.array([0, TOTAL // 2, TOTAL], dtype=np.uint32)
        with pytest.raises(CoderError, match="outside"):
            encode_symbols([5], lambda i: cum)

    def test_truncated_stream_errors_with_offset(self):
        indices, tables, *_ = self.gaussian_stream(10, 500)
        blob = encode_symbols(indices, lambda i: tables[i])
        with pytest.raises(CoderError, match="offset"):
            decode_symbols(blob[: len(blob) // 4], len(indices), lambda i: tables[i])

    def test_cross_instance_determinism(self):
        """Encoding the same stream twice gives identical bytes."""
        a = encode_symbols(*self._fixed_stream())
        b = encode_symbols(*self._fixed_stream())
        assert a == b

    def _fixed_stream(self):
        indices, tables, *_ = self.gaussian_stream(11, 300)
        return indices, lambda i: tables[i]

    @given(st.lists(st.integers(0, 7), max_size=200), st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_roundtrip_property(self, syms, seed):
        """Any symbol sequence under any valid table round-trips."""
        rng = np.random.default_rng(seed)
        freq = rng.integers(1, 1000, size=8).astype(np.int64)
        freq[rng.integers(0, 8)] += TOTAL - freq.sum()
        if freq.max() <= 0 or freq.sum() != TOTAL or (freq < 1).any():
            freq = np.full(8, TOTAL // 8, dtype=np.int64)
        cum = np.concatenate(([0], np.cumsum(freq))).astype(np.uint32)
        blob = encode_symbols(syms, lambda i: cum)
        back = decode_symbols(blob, len(syms), lambda i: cum)
        np.testing.assert_array_equal(back, np.asarray(syms, dtype=np.int64))


class TestFactorizedPrior:
    def test_fields_shapes_and_positiveness(self):
        prior = FactorizedGaussianPrior(4)
        mu, sigma = prior.fields((4, 8, 16))
        assert mu.shape == (4, 8, 16) and sigma.shape == (4, 8, 16)
        assert (sigma > 0).all()

    def test_initialization_is_standard_normal(self):
        prior = FactorizedGaussianPrior(3)
        mu, sigma = prior.fields((3, 1, 1))
        np.testing.assert_allclose(mu[:, 0, 0], 0.0, atol=0)
        np.testing.assert_allclose(sigma[:, 0, 0], 1.0, rtol=0, atol=2e-6)

    def test_nll_gradients_reach_parameters(self):
        prior = FactorizedGaussianPrior(2)
        rng = np.random.default_rng(13)
        noisy = tensor(rng.normal(size=(2, 4, 4)))
        with Tape() as tape:
            tape.backward(prior.nll_bits(noisy))
        assert prior.loc.grad is not None and np.abs(prior.loc.grad).sum() > 0
        assert prior.scale_raw.grad is not None and np.abs(prior.scale_raw.grad).sum() > 0
