"""Two-phase optimization.

Phase 1 ("pretrain") fits the latent VAE: reconstruction plus a
beta-weighted KL to the standard normal, with sampled reparameterization
noise.  Phase 2 ("finetune") freezes the latent encoder bitwise and trains
the decoder, hyper path, and z prior against the rate-distortion loss,
using additive uniform noise as the quantization proxy.

Everything here is deterministic given the config seed: batch order,
reparameterization draws, and validation noise all come from dedicated
Philox streams.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .coding.gaussian import noisy_rate_bits
from .model import CodecModel
from .nn import autodiff as ad
from .nn.autodiff import Tape, Tensor, tensor

__all__ = [
    "TrainConfig",
    "TrainLogRecord",
    "TrainingError",
    "AdamW",
    "pretrain_loss",
    "rd_loss",
    "lr_schedule",
    "clip_global_norm",
    "run_phase",
]

PHASES = ("pretrain", "finetune")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    phase: str
    peak_lr: float
    warmup_steps: int
    total_steps: int
    batch_size: int = 16
    weight_decay: float = 1e-4
    lambda_rd: float = 0.01
    beta_kl: float = 1e-4
    clip_norm: float = 1.0
    val_every: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.phase not in PHASES:
            raise TrainingError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise TrainingError(
                f"need 0 <= warmup ({self.warmup_steps}) < total ({self.total_steps})")
        for name in ("peak_lr", "lambda_rd", "beta_kl", "clip_norm"):
            if not getattr(self, name) > 0:
                raise TrainingError(f"{name} must be positive")
        if self.batch_size < 1 or self.val_every < 1:
            raise TrainingError("batch_size and val_every must be >= 1")
        if self.weight_decay < 0:
            raise TrainingError("weight_decay must be >= 0")


@dataclass
class TrainLogRecord:
    """One optimization step.  ``rate_latent`` is the KL term during
    pretraining and the latent rate (bits) during fine-tuning; the weights
    needed to recombine the components into ``loss`` are logged alongside."""

    step: int
    phase: str
    loss: float
    distortion: float
    rate_latent: float
    rate_hyper: float
    latent_weight: float
    lr: float
    grad_norm: float
    seconds: float

    def recombined(self) -> float:
        return self.distortion + self.latent_weight * self.rate_latent + self.rate_hyper

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self))

    @classmethod
    def from_json(cls, line: str) -> "TrainLogRecord":
        return cls(**json.loads(line))


# --- losses ---------------------------------------------------------------


def _require_finite(value: float, what: str, parts: dict[str, float]) -> None:
    if not math.isfinite(value):
        detail = ", ".join(f"{k}={v:.6g}" for k, v in parts.items())
        raise TrainingError(f"non-finite {what}: {value} ({detail})")


def pretrain_loss(x: Tensor, x_hat: Tensor, mu: Tensor, sigma: Tensor,
                  beta: float) -> tuple[Tensor, dict[str, float]]:
    """0.5*||x - x_hat||^2 + beta * KL(q || N(0, I)), mean over batch."""
    batch = x.shape[0]
    err = ad.sub(x_hat, x)
    distortion = ad.mul(ad.tsum(ad.square(err)), 0.5 / batch)
    kl = ad.mul(CodecModel.kl_to_standard_normal(mu, sigma), 1.0 / batch)
    loss = ad.add(distortion, ad.mul(kl, beta))
    parts = {"distortion": float(distortion.data), "kl": float(kl.data)}
    _require_finite(float(loss.data), "pretrain loss", parts)
    return loss, parts


def rd_loss(x: Tensor, x_hat: Tensor, rate_y_bits: Tensor, rate_z_bits: Tensor,
            lam: float) -> tuple[Tensor, dict[str, float]]:
    """lambda * rate_y + rate_z + ||x - x_hat||^2, mean over batch.

    The weight sits on the latent-rate term; distortion and the hyper rate
    carry unit weight.
    """
    batch = x.shape[0]
    err = ad.sub(x_hat, x)
    distortion = ad.mul(ad.tsum(ad.square(err)), 1.0 / batch)
    rate_y = ad.mul(rate_y_bits, 1.0 / batch)
    rate_z = ad.mul(rate_z_bits, 1.0 / batch)
    loss = ad.add(ad.add(ad.mul(rate_y, lam), rate_z), distortion)
    parts = {
        "distortion": float(distortion.data),
        "rate_y": float(rate_y.data),
        "rate_z": float(rate_z.data),
    }
    _require_finite(float(loss.data), "rate-distortion loss", parts)
    return loss, parts


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to the peak, then cosine decay to zero."""
    if step < 0 or step > cfg.total_steps:
        raise TrainingError(f"step {step} outside [0, {cfg.total_steps}]")
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / span
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# --- optimizer ------------------------------------------------------------


class AdamW:
    """Adaptive moments with decoupled weight decay.

    Moment state is keyed by parameter name so the update order is the
    canonical parameter order; parameters without a gradient are skipped
    entirely (no decay, no moment update).
    """

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    def __init__(self, named_params, weight_decay: float):
        self.params = list(named_params)
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.BETA1**self.t
        bc2 = 1.0 - self.BETA2**self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.BETA1) * (g - m)
            v += (1.0 - self.BETA2) * (g * g - v)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.EPS)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.data.dtype)


def clip_global_norm(params, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the pre-clip norm.  Parameters without gradients are ignored.
    """
    total = 0.0
    grads = []
    for p in params:
        if p.grad is not None:
            grads.append(p.grad)
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        scale = np.float32(max_norm / norm)
        for g in grads:
            g *= scale
    return norm


# --- phase driver ---------------------------------------------------------


class _Batcher:
    """Deterministic shuffled batches with epoch reshuffling."""

    def __init__(self, n: int, batch_size: int, seed: int):
        if n < 1:
            raise TrainingError("empty training set")
        self.n = n
        self.batch_size = batch_size
        self.rng = np.random.Generator(np.random.Philox(key=[seed, 0xBA7C4]))
        self._order = self.rng.permutation(n)
        self._pos = 0

    def next_indices(self) -> np.ndarray:
        out = []
        while len(out) < self.batch_size:
            if self._pos == self.n:
                self._order = self.rng.permutation(self.n)
                self._pos = 0
            take = min(self.batch_size - len(out), self.n - self._pos)
            out.extend(self._order[self._pos:self._pos + take])
            self._pos += take
        return np.asarray(out)


def _forward_loss(model: CodecModel, cfg: TrainConfig, x: np.ndarray,
                  rng: np.random.Generator) -> tuple[Tensor, dict[str, float]]:
    """Build the phase loss graph for one batch; call under a Tape to train."""
    x_t = tensor(x)
    if cfg.phase == "pretrain":
        mu, sigma = model.encode_latent(x_t)
        eps = tensor(rng.standard_normal(mu.shape).astype(np.float32))
        y = model.reparameterize(mu, sigma, eps)
        x_hat = model.decode_reconstruction(y)
        return pretrain_loss(x_t, x_hat, mu, sigma, cfg.beta_kl)
    mu, _ = model.encode_latent(x_t)
    y = mu  # deterministic latent; sampling happens only in pretraining
    y_noisy = ad.add(y, tensor(rng.uniform(-0.5, 0.5, y.shape).astype(np.float32)))
    z = model.hyper_encode(y)
    z_noisy = ad.add(z, tensor(rng.uniform(-0.5, 0.5, z.shape).astype(np.float32)))
    mu_y, sigma_y = model.hyper_decode(z_noisy)
    rate_y = noisy_rate_bits(y_noisy, mu_y, sigma_y)
    rate_z = model.z_prior.nll_bits(z_noisy)
    x_hat = model.decode_reconstruction(y_noisy)
    return rd_loss(x_t, x_hat, rate_y, rate_z, cfg.lambda_rd)


def validation_loss(model: CodecModel, cfg: TrainConfig, val_x: np.ndarray) -> float:
    """Mean phase loss over the validation set with frozen noise draws.

    A fresh fixed-seed stream makes successive validations comparable: the
    same epsilon / uniform noise is replayed every time.
    """
    rng = np.random.Generator(np.random.Philox(key=[cfg.seed, 0x7A11DA7E]))
    total = 0.0
    bs = cfg.batch_size
    n_batches = 0
    for start in range(0, len(val_x), bs):
        loss, _ = _forward_loss(model, cfg, val_x[start:start + bs], rng)
        total += float(loss.data)
        n_batches += 1
    return total / max(n_batches, 1)


def _trainable(model: CodecModel, phase: str):
    """(name, param) pairs updated in this phase, in canonical order."""
    if phase == "pretrain":
        keep = ("encoder.", "decoder.")
    else:
        keep = ("decoder.", "hyper_encoder.", "hyper_decoder.", "z_prior.")
    return [(n, p) for n, p in model.named_parameters() if n.startswith(keep)]


def run_phase(model: CodecModel, cfg: TrainConfig, train_x: np.ndarray,
              val_x: np.ndarray, out_dir) -> tuple[Path, list[TrainLogRecord]]:
    """Train one phase; returns (best checkpoint path, step records).

    Writes ``log-<phase>.jsonl`` and ``best-<phase>.cvcp`` under ``out_dir``.
    The best checkpoint is chosen by validation loss, evaluated every
    ``val_every`` steps and after the final step.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.phase == "finetune":
        for _, p in model.encoder.named_parameters():
            p.requires_grad = False
    trainable = _trainable(model, cfg.phase)
    optimizer = AdamW(trainable, cfg.weight_decay)
    batcher = _Batcher(len(train_x), cfg.batch_size, cfg.seed)
    noise_rng = np.random.Generator(np.random.Philox(key=[cfg.seed, 0x0153]))

    best_loss = math.inf
    best_path = out_dir / f"best-{cfg.phase}.cvcp"
    log_path = out_dir / f"log-{cfg.phase}.jsonl"
    records: list[TrainLogRecord] = []

    with open(log_path, "w") as log_file:
        for step in range(1, cfg.total_steps + 1):
            started = time.perf_counter()
            batch = train_x[batcher.next_indices()]
            model.zero_grads()
            with Tape() as tape:
                loss, parts = _forward_loss(model, cfg, batch, noise_rng)
                tape.backward(loss)
            grad_norm = clip_global_norm([p for _, p in trainable], cfg.clip_norm)
            lr = lr_schedule(step, cfg)
            optimizer.step(lr)

            if cfg.phase == "pretrain":
                rec = TrainLogRecord(
                    step=step, phase=cfg.phase, loss=float(loss.data),
                    distortion=parts["distortion"], rate_latent=parts["kl"],
                    rate_hyper=0.0, latent_weight=cfg.beta_kl, lr=lr,
                    grad_norm=grad_norm, seconds=time.perf_counter() - started)
            else:
                rec = TrainLogRecord(
                    step=step, phase=cfg.phase, loss=float(loss.data),
                    distortion=parts["distortion"], rate_latent=parts["rate_y"],
                    rate_hyper=parts["rate_z"], latent_weight=cfg.lambda_rd, lr=lr,
                    grad_norm=grad_norm, seconds=time.perf_counter() - started)
            records.append(rec)
            log_file.write(rec.to_json() + "\n")

            if step % cfg.val_every == 0 or step == cfg.total_steps:
                val = validation_loss(model, cfg, val_x)
                _require_finite(val, "validation loss", {"step": step})
                if val < best_loss:
                    best_loss = val
                    model.save(best_path)
    return best_path, records
