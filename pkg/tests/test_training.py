"""Losses, schedule, optimizer, and the phase driver."""

import json
import math

import numpy as np
import pytest

from cvcodec import data as D
from cvcodec.model import CodecModel, desk_config
from cvcodec.nn.autodiff import Tape, Tensor, gradcheck, tensor
from cvcodec.nn.layers import Parameter
from cvcodec.training import (
    AdamW,
    TrainConfig,
    TrainingError,
    TrainLogRecord,
    clip_global_norm,
    lr_schedule,
    pretrain_loss,
    rd_loss,
    run_phase,
)

TINY = dict(channels=2, height=16, width=16, patch=4, d_model=8, n_heads=2,
            window=2, latent_channels=2, hyper_patch=2, hyper_d_model=8,
            hyper_heads=2, hyper_window=1, hyper_latent_channels=2, mlp_ratio=2)


def tiny_model(seed=0):
    return CodecModel(desk_config(seed=seed, **TINY))


def tiny_dataset(n=24):
    spec = D.SyntheticSpec(seed=0, channels=2, grid_h=16, grid_w=16,
                           n_train=n, n_val=8, n_test=4)
    grids = [D.make_instance(spec, "train", i) for i in range(n)]
    stats = D.compute_stats(grids)
    arr = np.stack([D.normalize(g, stats).values for g in grids])
    return arr[: n - 8], arr[n - 8:]


def pcfg(**kw):
    base = dict(phase="pretrain", peak_lr=1e-3, warmup_steps=5, total_steps=40,
                batch_size=4, val_every=20, seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestTrainConfig:
    def test_valid(self):
        cfg = pcfg()
        assert cfg.phase == "pretrain"

    def test_bad_phase(self):
        with pytest.raises(TrainingError, match="phase"):
            pcfg(phase="warmup")

    def test_warmup_must_precede_total(self):
        with pytest.raises(TrainingError, match="warmup"):
            pcfg(warmup_steps=40, total_steps=40)

    def test_positive_rates(self):
        with pytest.raises(TrainingError):
            pcfg(peak_lr=0.0)
        with pytest.raises(TrainingError):
            pcfg(lambda_rd=-1.0)


class TestPretrainLoss:
    def test_perfect_reconstruction_standard_posterior_is_zero(self):
        x = tensor(np.random.default_rng(0).normal(size=(2, 3, 4, 4)))
        mu = tensor(np.zeros((2, 2, 2, 2)))
        sigma = tensor(np.ones((2, 2, 2, 2)))
        loss, parts = pretrain_loss(x, x, mu, sigma, beta=1.0)
        assert float(loss.data) == pytest.approx(0.0, abs=1e-6)
        assert parts["distortion"] == pytest.approx(0.0, abs=1e-7)
        assert parts["kl"] == pytest.approx(0.0, abs=1e-5)

    def test_zero_beta_reduces_to_mse(self):
        rng = np.random.default_rng(1)
        x = tensor(rng.normal(size=(2, 1, 4, 4)))
        x_hat = tensor(rng.normal(size=(2, 1, 4, 4)))
        mu = tensor(rng.normal(size=(2, 1, 2, 2)))
        sigma = tensor(np.full((2, 1, 2, 2), 0.5))
        loss, _ = pretrain_loss(x, x_hat, mu, sigma, beta=0.0)
        want = 0.5 * np.sum((x.data - x_hat.data) ** 2) / 2
        assert float(loss.data) == pytest.approx(want, rel=1e-6)

    def test_nonfinite_aborts(self):
        x = tensor(np.zeros((1, 1, 2, 2)))
        bad = tensor(np.full((1, 1, 2, 2), np.nan))
        with pytest.raises(TrainingError, match="non-finite"):
            pretrain_loss(x, bad, tensor(np.zeros((1, 1))), tensor(np.ones((1, 1))), 1.0)

    def test_finite_differences_through_full_model(self):
        """Central differences on sampled parameters vs the tape gradient.

        The whole model runs in float64 here; float32 rounding would drown
        the differences at step 1e-6.
        """
        model = tiny_model()
        for _, p in model.named_parameters():
            p.data = p.data.astype(np.float64)
        rng = np.random.default_rng(2)
        x = tensor(rng.normal(size=(1, 2, 16, 16)), dtype=np.float64)
        eps = tensor(rng.standard_normal((1, 2, 4, 4)), dtype=np.float64)

        def loss_value():
            mu, sigma = model.encode_latent(x)
            y = model.reparameterize(mu, sigma, eps)
            x_hat = model.decode_reconstruction(y)
            loss, _ = pretrain_loss(x, x_hat, mu, sigma, beta=1e-2)
            return loss

        with Tape() as tape:
            tape.backward(loss_value())

        # Input-side leaves force the chain through every stage.
        leaves = [
            ("enc.embed.bias", model.encoder.embed.bias),
            ("enc.head_scale.bias", model.encoder.head_scale.bias),
            ("dec.embed.weight", model.decoder.embed.weight),
            ("dec.head.bias", model.decoder.head.bias),
        ]
        for label, p in leaves:
            flat = p.data.reshape(-1)
            picks = rng.choice(flat.size, size=min(8, flat.size), replace=False)
            for i in picks:
                x0 = flat[i]
                step = 1e-6 * max(1.0, abs(x0))
                flat[i] = x0 + step
                fp = float(loss_value().data)
                flat[i] = x0 - step
                fm = float(loss_value().data)
                flat[i] = x0
                numeric = (fp - fm) / (2 * step)
                analytic = p.grad.reshape(-1)[i]
                rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-4)
                assert rel < 1e-3, (label, i, analytic, numeric)


class TestRdLoss:
    def setup_method(self):
        rng = np.random.default_rng(3)
        self.x = tensor(rng.normal(size=(2, 1, 4, 4)))
        self.x_hat = tensor(rng.normal(size=(2, 1, 4, 4)))
        self.ry = tensor(np.array(740.0))
        self.rz = tensor(np.array(120.0))

    def test_lambda_scales_only_latent_rate(self):
        l1, p1 = rd_loss(self.x, self.x_hat, self.ry, self.rz, lam=1.0)
        l2, p2 = rd_loss(self.x, self.x_hat, self.ry, self.rz, lam=2.0)
        assert p1 == p2  # components are reported unweighted
        assert float(l2.data) - float(l1.data) == pytest.approx(p1["rate_y"], rel=1e-6)

    def test_tiny_lambda_leaves_rate_z_and_distortion(self):
        loss, parts = rd_loss(self.x, self.x_hat, self.ry, self.rz, lam=1e-12)
        assert float(loss.data) == pytest.approx(parts["rate_z"] + parts["distortion"], rel=1e-6)

    def test_components_recombine(self):
        for lam in (0.1, 1.0, 10.0):
            loss, parts = rd_loss(self.x, self.x_hat, self.ry, self.rz, lam)
            want = lam * parts["rate_y"] + parts["rate_z"] + parts["distortion"]
            assert abs(float(loss.data) - want) / want < 1e-5

    def test_nonfinite_aborts(self):
        with pytest.raises(TrainingError, match="non-finite"):
            rd_loss(self.x, self.x_hat, tensor(np.array(np.inf)), self.rz, 1.0)


class TestLrSchedule:
    def test_endpoints_pretrain_peak(self):
        cfg = pcfg(peak_lr=2e-4, warmup_steps=100, total_steps=1000)
        assert lr_schedule(0, cfg) == 0.0
        assert lr_schedule(100, cfg) == pytest.approx(2e-4)
        assert lr_schedule(1000, cfg) == pytest.approx(0.0, abs=1e-12)

    def test_midpoint_of_decay_is_half_peak(self):
        cfg = pcfg(phase="finetune", peak_lr=5e-5, warmup_steps=100, total_steps=1100)
        assert lr_schedule(600, cfg) == pytest.approx(2.5e-5)

    def test_warmup_is_linear(self):
        cfg = pcfg(peak_lr=1e-3, warmup_steps=10, total_steps=100)
        for s in range(11):
            assert lr_schedule(s, cfg) == pytest.approx(1e-3 * s / 10)

    def test_monotone_decay(self):
        cfg = pcfg(peak_lr=1e-3, warmup_steps=5, total_steps=50)
        rates = [lr_schedule(s, cfg) for s in range(5, 51)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))

    def test_out_of_range_rejected(self):
        with pytest.raises(TrainingError):
            lr_schedule(41, pcfg(total_steps=40))


class TestAdamW:
    def make_param(self, values):
        p = Parameter(np.asarray(values, dtype=np.float32))
        return p

    def test_no_gradient_no_change(self):
        p = self.make_param([1.0, -2.0])
        opt = AdamW([("p", p)], weight_decay=0.5)
        opt.step(lr=0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_zero_gradient_zero_decay_no_change(self):
        p = self.make_param([1.0, -2.0])
        p.grad = np.zeros(2, dtype=np.float32)
        opt = AdamW([("p", p)], weight_decay=0.0)
        for _ in range(3):
            opt.step(lr=0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_quadratic_converges(self):
        p = self.make_param([0.0])
        opt = AdamW([("p", p)], weight_decay=0.0)
        for _ in range(500):
            p.grad = (2.0 * (p.data - 3.0)).astype(np.float32)
            opt.step(lr=0.05)
        assert abs(float(p.data[0]) - 3.0) < 1e-3

    def test_decay_shrinks_geometrically(self):
        p = self.make_param([4.0])
        wd, lr = 0.1, 0.01
        opt = AdamW([("p", p)], weight_decay=wd)
        for _ in range(10):
            p.grad = np.zeros(1, dtype=np.float32)
            opt.step(lr=lr)
        want = 4.0 * (1.0 - lr * wd) ** 10
        assert float(p.data[0]) == pytest.approx(want, rel=1e-5)

    def test_deterministic(self):
        def run():
            p = self.make_param([1.0, 2.0, 3.0])
            opt = AdamW([("p", p)], weight_decay=1e-2)
            rng = np.random.default_rng(4)
            for _ in range(20):
                p.grad = rng.normal(size=3).astype(np.float32)
                opt.step(lr=0.01)
            return p.data.copy()

        np.testing.assert_array_equal(run(), run())


class TestClip:
    def test_below_threshold_untouched(self):
        p = Parameter(np.zeros(3, dtype=np.float32))
        p.grad = np.array([0.3, 0.0, 0.4], dtype=np.float32)
        norm = clip_global_norm([p], 1.0)
        assert norm == pytest.approx(0.5)
        np.testing.assert_array_equal(p.grad, np.array([0.3, 0.0, 0.4], np.float32))

    def test_above_threshold_scaled(self):
        p = Parameter(np.zeros(2, dtype=np.float32))
        p.grad = np.array([30.0, 40.0], dtype=np.float32)
        norm = clip_global_norm([p], 1.0)
        assert norm == pytest.approx(50.0)
        assert np.linalg.norm(p.grad) == pytest.approx(1.0, rel=1e-5)

    def test_joint_norm_across_params(self):
        a = Parameter(np.zeros(1, dtype=np.float32))
        b = Parameter(np.zeros(1, dtype=np.float32))
        a.grad = np.array([3.0], dtype=np.float32)
        b.grad = np.array([4.0], dtype=np.float32)
        assert clip_global_norm([a, b], 10.0) == pytest.approx(5.0)


class TestLogRecord:
    def test_json_roundtrip(self):
        rec = TrainLogRecord(step=3, phase="pretrain", loss=1.5, distortion=1.0,
                             rate_latent=5000.0, rate_hyper=0.0, latent_weight=1e-4,
                             lr=1e-3, grad_norm=0.7, seconds=0.01)
        again = TrainLogRecord.from_json(rec.to_json())
        assert again == rec
        assert rec.recombined() == pytest.approx(1.5)


class TestRunPhase:
    def test_pretrain_descends_and_logs(self, tmp_path):
        train, val = tiny_dataset()
        model = tiny_model()
        cfg = pcfg(total_steps=150, warmup_steps=10, peak_lr=2e-3, val_every=50)
        best, recs = run_phase(model, cfg, train, val, tmp_path)
        assert best.exists()
        assert len(recs) == 150
        first = np.mean([r.loss for r in recs[:50]])
        last = np.mean([r.loss for r in recs[-50:]])
        assert last < first
        worst = max(abs(r.loss - r.recombined()) / max(abs(r.loss), 1e-12) for r in recs)
        assert worst < 1e-5
        lines = (tmp_path / "log-pretrain.jsonl").read_text().splitlines()
        assert len(lines) == 150
        assert json.loads(lines[0])["step"] == 1

    def test_trajectory_deterministic(self, tmp_path):
        train, val = tiny_dataset()

        def run(sub):
            model = tiny_model()
            cfg = pcfg(total_steps=12, val_every=6)
            _, recs = run_phase(model, cfg, train, val, tmp_path / sub)
            return [r.loss for r in recs]

        assert run("a") == run("b")

    def test_finetune_freezes_encoder_bitwise(self, tmp_path):
        train, val = tiny_dataset()
        model = tiny_model()
        before = {n: p.data.copy() for n, p in model.encoder.named_parameters()}
        cfg = pcfg(phase="finetune", total_steps=25, warmup_steps=2, val_every=10)
        _, recs = run_phase(model, cfg, train, val, tmp_path)
        for n, p in model.encoder.named_parameters():
            np.testing.assert_array_equal(p.data, before[n], err_msg=n)
        # ... while the other groups moved
        assert any(r.rate_hyper > 0 for r in recs)

    def test_finetune_descends(self, tmp_path):
        train, val = tiny_dataset()
        model = tiny_model()
        # quick pretrain first so the latent space is not random noise
        run_phase(model, pcfg(total_steps=80, peak_lr=2e-3, val_every=40),
                  train, val, tmp_path / "p1")
        cfg = pcfg(phase="finetune", total_steps=150, warmup_steps=10,
                   peak_lr=1e-3, val_every=50)
        _, recs = run_phase(model, cfg, train, val, tmp_path / "p2")
        first = np.mean([r.loss for r in recs[:50]])
        last = np.mean([r.loss for r in recs[-50:]])
        assert last < first

    def test_best_checkpoint_tracks_validation(self, tmp_path):
        train, val = tiny_dataset()
        model = tiny_model()
        cfg = pcfg(total_steps=30, val_every=10)
        best, _ = run_phase(model, cfg, train, val, tmp_path)
        loaded = CodecModel.load(best)
        assert loaded.cfg == model.cfg

    def test_empty_train_set_rejected(self, tmp_path):
        model = tiny_model()
        with pytest.raises(TrainingError, match="empty"):
            run_phase(model, pcfg(), np.zeros((0, 2, 16, 16), np.float32),
                      np.zeros((1, 2, 16, 16), np.float32), tmp_path)
