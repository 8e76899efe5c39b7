"""The dual-VAE codec network.

Four transformer components share one backbone style (window-attention
stages over a token grid):

* ``LatentEncoder``   x -> (mu_x, sigma_x), the variational posterior over y
* ``Decoder``         y -> x_hat, the reconstruction path
* ``HyperEncoder``    y -> z, a second, coarser latent
* ``HyperDecoder``    z_hat -> (mu_y, sigma_y), the coding distribution for y

``CodecModel`` bundles them with a learned factorized Gaussian prior for z
and owns checkpoint (de)serialization.  All forwards are pure functions of
(input, parameters); sampling happens only where an explicit ``eps`` or RNG
is passed in.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .coding.prior import FactorizedGaussianPrior
from .nn import autodiff as ad
from .nn.attention import Stage, WindowSpec
from .nn.autodiff import Tensor, tensor
from .nn.checkpoint import (
    CheckpointError,
    config_hash,
    load_arrays,
    save_arrays,
)
from .nn.layers import Linear, Module, init_rng

__all__ = [
    "ModelConfig",
    "ConfigError",
    "CodecModel",
    "desk_config",
    "stage_windows",
]

# Bounds on the latent log-scale head; wider grids give degenerate posteriors.
LOG_SIGMA_MIN = -10.0
LOG_SIGMA_MAX = 10.0
SCALE_FLOOR = 1e-6


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description; canonically serializable and hashable.

    The token grid is (height/patch, width/patch); the latent y lives on it
    with ``latent_channels`` channels.  The hyper path patchifies y again by
    ``hyper_patch``, giving z on a coarser grid with ``hyper_latent_channels``
    channels.  ``window`` and ``hyper_window`` set the square window side for
    each trunk; the elongated windows are derived (see ``stage_windows``).
    """

    channels: int = 8
    height: int = 32
    width: int = 64
    patch: int = 4
    d_model: int = 64
    n_heads: int = 4
    depth: int = 1
    mlp_ratio: int = 4
    window: int = 4
    latent_channels: int = 8
    hyper_patch: int = 4
    hyper_d_model: int = 32
    hyper_heads: int = 2
    hyper_depth: int = 1
    hyper_window: int = 2
    hyper_latent_channels: int = 8
    lambda_rd: float = 0.01
    seed: int = 0

    def __post_init__(self):
        for name in ("channels", "height", "width", "patch", "d_model", "n_heads",
                     "depth", "mlp_ratio", "window", "latent_channels", "hyper_patch",
                     "hyper_d_model", "hyper_heads", "hyper_depth", "hyper_window",
                     "hyper_latent_channels", "seed"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool):
                raise ConfigError(f"{name} must be an int, got {v!r}")
            if name != "seed" and v < 1:
                raise ConfigError(f"{name} must be positive, got {v}")
        if isinstance(self.lambda_rd, int) and not isinstance(self.lambda_rd, bool):
            object.__setattr__(self, "lambda_rd", float(self.lambda_rd))
        if not (isinstance(self.lambda_rd, float) and self.lambda_rd > 0
                and np.isfinite(self.lambda_rd)):
            raise ConfigError(f"lambda_rd must be a positive float, got {self.lambda_rd!r}")
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError(
                f"grid {self.height}x{self.width} not divisible by patch {self.patch}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.hyper_d_model % self.hyper_heads:
            raise ConfigError(
                f"hyper_d_model {self.hyper_d_model} not divisible by {self.hyper_heads} heads")
        gh, gw = self.token_grid
        if gh % self.hyper_patch or gw % self.hyper_patch:
            raise ConfigError(
                f"token grid {gh}x{gw} not divisible by hyper patch {self.hyper_patch}")
        # Window derivation raises ConfigError itself if a spec cannot tile.
        stage_windows(gh, gw, self.window)
        stage_windows(*self.hyper_grid, self.hyper_window)

    @property
    def token_grid(self) -> tuple[int, int]:
        return self.height // self.patch, self.width // self.patch

    @property
    def hyper_grid(self) -> tuple[int, int]:
        gh, gw = self.token_grid
        return gh // self.hyper_patch, gw // self.hyper_patch

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}: {v!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        seen: dict[str, object] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            if ": " not in line:
                raise ConfigError(f"config line {lineno}: expected 'name: value'")
            name, _, raw = line.partition(": ")
            name, raw = name.strip(), raw.strip()
            if name not in known:
                raise ConfigError(f"config line {lineno}: unknown field {name!r}")
            if name in seen:
                raise ConfigError(f"config line {lineno}: duplicate field {name!r}")
            try:
                if name == "lambda_rd":
                    seen[name] = float(raw)
                else:
                    seen[name] = int(raw)
            except ValueError as e:
                raise ConfigError(f"config line {lineno}: bad value {raw!r} for {name}") from e
        missing = set(known) - set(seen)
        if missing:
            raise ConfigError(f"config missing fields: {sorted(missing)}")
        return cls(**seen)

    def hash(self) -> bytes:
        return config_hash(self.to_text())


def desk_config(**overrides) -> ModelConfig:
    """The default desk-scale configuration used throughout the tests."""
    return dataclasses.replace(ModelConfig(), **overrides) if overrides else ModelConfig()


def stage_windows(grid_h: int, grid_w: int, square: int) -> list[WindowSpec]:
    """Derive the [square, ew, ns] window triple for a token grid.

    The elongated windows halve one side and double the other, clamped so
    they still tile the grid; the aspect invariants of WindowSpec then hold
    by construction or the config is rejected.
    """
    sq = WindowSpec("square", square, square)
    ew = WindowSpec("ew", max(square // 2, 1), min(2 * square, grid_w))
    ns = WindowSpec("ns", min(2 * square, grid_h), max(square // 2, 1))
    for spec in (sq, ew, ns):
        try:
            spec.grid_windows(grid_h, grid_w)
        except ValueError as e:
            raise ConfigError(str(e)) from e
    return [sq, ew, ns]


# --- token map plumbing (all tape-differentiable) -------------------------

def patchify(x: Tensor, patch: int) -> Tensor:
    """(B, C, H, W) -> (B, H/p, W/p, p*p*C) with row-major patch interiors."""
    b, c, h, w = x.shape
    gh, gw = h // patch, w // patch
    t = ad.reshape(x, (b, c, gh, patch, gw, patch))
    t = ad.permute(t, (0, 2, 4, 3, 5, 1))
    return ad.reshape(t, (b, gh, gw, patch * patch * c))


def unpatchify(t: Tensor, patch: int, channels: int) -> Tensor:
    """Inverse of patchify: (B, gh, gw, p*p*C) -> (B, C, gh*p, gw*p)."""
    b, gh, gw, _ = t.shape
    x = ad.reshape(t, (b, gh, gw, patch, patch, channels))
    x = ad.permute(x, (0, 5, 1, 3, 2, 4))
    return ad.reshape(x, (b, channels, gh * patch, gw * patch))


def maps_to_tokens(y: Tensor) -> Tensor:
    """(B, C, h, w) -> (B, h, w, C)."""
    return ad.permute(y, (0, 2, 3, 1))


def tokens_to_maps(t: Tensor) -> Tensor:
    """(B, h, w, C) -> (B, C, h, w)."""
    return ad.permute(t, (0, 3, 1, 2))


class Trunk(Module):
    """A run of window-attention stages over a fixed token grid."""

    def __init__(self, grid: tuple[int, int], dim: int, heads: int, depth: int,
                 window: int, mlp_ratio: int, rng: np.random.Generator):
        super().__init__()
        self.grid = grid
        specs = stage_windows(grid[0], grid[1], window)
        self.register_list(
            "stages", [Stage(dim, heads, specs, mlp_ratio, rng) for _ in range(depth)])

    def __call__(self, t: Tensor) -> Tensor:
        if t.shape[1:3] != self.grid:
            raise ValueError(f"token grid {t.shape[1:3]} does not match trunk {self.grid}")
        for stage in self.stages:
            t = stage(t)
        return t


class LatentEncoder(Module):
    """x -> posterior (mu_x, sigma_x) over the latent y."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        d, patch = cfg.d_model, cfg.patch
        self.embed = Linear(patch * patch * cfg.channels, d, rng)
        self.trunk = Trunk(cfg.token_grid, d, cfg.n_heads, cfg.depth,
                           cfg.window, cfg.mlp_ratio, rng)
        self.head_mean = Linear(d, cfg.latent_channels, rng)
        self.head_scale = Linear(d, cfg.latent_channels, rng)
        # Start the posterior near unit variance: a full-gain scale head puts
        # exp(s) in the thousands at init and the KL gradient swamps everything.
        self.head_scale.weight.data *= np.float32(0.01)

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        cfg = self.cfg
        if x.shape[1:] != (cfg.channels, cfg.height, cfg.width):
            raise ValueError(
                f"input shape {x.shape[1:]} does not match config "
                f"({cfg.channels}, {cfg.height}, {cfg.width})")
        t = self.trunk(self.embed(patchify(x, cfg.patch)))
        mu = tokens_to_maps(self.head_mean(t))
        s = tokens_to_maps(self.head_scale(t))
        sigma = ad.exp(ad.clamp(s, LOG_SIGMA_MIN, LOG_SIGMA_MAX))
        return mu, sigma


class Decoder(Module):
    """y -> x_hat over the full grid."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        d, patch = cfg.d_model, cfg.patch
        self.embed = Linear(cfg.latent_channels, d, rng)
        self.trunk = Trunk(cfg.token_grid, d, cfg.n_heads, cfg.depth,
                           cfg.window, cfg.mlp_ratio, rng)
        self.head = Linear(d, patch * patch * cfg.channels, rng)

    def __call__(self, y: Tensor) -> Tensor:
        cfg = self.cfg
        gh, gw = cfg.token_grid
        if y.shape[1:] != (cfg.latent_channels, gh, gw):
            raise ValueError(
                f"latent shape {y.shape[1:]} does not match config "
                f"({cfg.latent_channels}, {gh}, {gw})")
        t = self.trunk(self.embed(maps_to_tokens(y)))
        return unpatchify(self.head(t), cfg.patch, cfg.channels)


class HyperEncoder(Module):
    """y -> continuous hyper-latent z on the coarser grid."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        d, hp = cfg.hyper_d_model, cfg.hyper_patch
        self.embed = Linear(hp * hp * cfg.latent_channels, d, rng)
        self.trunk = Trunk(cfg.hyper_grid, d, cfg.hyper_heads, cfg.hyper_depth,
                           cfg.hyper_window, cfg.mlp_ratio, rng)
        self.head = Linear(d, cfg.hyper_latent_channels, rng)

    def __call__(self, y: Tensor) -> Tensor:
        cfg = self.cfg
        gh, gw = cfg.token_grid
        if y.shape[1:] != (cfg.latent_channels, gh, gw):
            raise ValueError(
                f"latent shape {y.shape[1:]} does not match config "
                f"({cfg.latent_channels}, {gh}, {gw})")
        t = self.trunk(self.embed(patchify(y, cfg.hyper_patch)))
        return tokens_to_maps(self.head(t))


class HyperDecoder(Module):
    """z_hat -> coding distribution (mu_y, sigma_y) for the latent y.

    Each hyper token covers a hyper_patch x hyper_patch block of latent
    positions, so the dual heads emit per-block parameter patches that are
    then unfolded back onto the latent grid.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        d, hp = cfg.hyper_d_model, cfg.hyper_patch
        self.embed = Linear(cfg.hyper_latent_channels, d, rng)
        self.trunk = Trunk(cfg.hyper_grid, d, cfg.hyper_heads, cfg.hyper_depth,
                           cfg.hyper_window, cfg.mlp_ratio, rng)
        self.head_mean = Linear(d, hp * hp * cfg.latent_channels, rng)
        self.head_scale = Linear(d, hp * hp * cfg.latent_channels, rng)

    def __call__(self, z: Tensor) -> tuple[Tensor, Tensor]:
        cfg = self.cfg
        hh, hw = cfg.hyper_grid
        if z.shape[1:] != (cfg.hyper_latent_channels, hh, hw):
            raise ValueError(
                f"hyper-latent shape {z.shape[1:]} does not match config "
                f"({cfg.hyper_latent_channels}, {hh}, {hw})")
        t = self.trunk(self.embed(maps_to_tokens(z)))
        mu = unpatchify(self.head_mean(t), cfg.hyper_patch, cfg.latent_channels)
        s = unpatchify(self.head_scale(t), cfg.hyper_patch, cfg.latent_channels)
        sigma = ad.add(ad.softplus(s), SCALE_FLOOR)
        return mu, sigma


class CodecModel(Module):
    """The full network plus the learned prior over z."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        rng = init_rng(cfg.seed)
        # Construction order is fixed; it defines the canonical parameter
        # order in checkpoints.
        self.encoder = LatentEncoder(cfg, rng)
        self.decoder = Decoder(cfg, rng)
        self.hyper_encoder = HyperEncoder(cfg, rng)
        self.hyper_decoder = HyperDecoder(cfg, rng)
        self.z_prior = FactorizedGaussianPrior(cfg.hyper_latent_channels)
        # Static prior over y itself, used by the factorized coding mode
        # (the no-hyper-path ablation).  It stays at its standard-normal
        # initialization: that is the prior the pretraining KL term pulls
        # the latents toward, so direct coding under it is exactly the
        # "pretrained model plus coder, nothing tuned" baseline.
        self.y_prior = FactorizedGaussianPrior(cfg.latent_channels)

    # -- variational pieces ------------------------------------------------

    def encode_latent(self, x: Tensor) -> tuple[Tensor, Tensor]:
        return self.encoder(x)

    @staticmethod
    def reparameterize(mu: Tensor, sigma: Tensor, eps) -> Tensor:
        """y = mu + sigma * eps; pass eps=0 for the deterministic mean path."""
        if isinstance(eps, (int, float)) and eps == 0:
            return mu
        if not isinstance(eps, Tensor):
            eps = tensor(np.asarray(eps, dtype=mu.data.dtype))
        if eps.shape != mu.shape:
            raise ValueError(f"eps shape {eps.shape} != mu shape {mu.shape}")
        return ad.add(mu, ad.mul(sigma, eps))

    @staticmethod
    def kl_to_standard_normal(mu: Tensor, sigma: Tensor) -> Tensor:
        """0.5 * sum(-log sigma^2 + mu^2 + sigma^2 - 1) over all elements."""
        s2 = ad.square(sigma)
        terms = ad.sub(ad.add(ad.square(mu), s2), ad.add(ad.log(s2), 1.0))
        return ad.mul(ad.tsum(terms), 0.5)

    def decode_reconstruction(self, y: Tensor) -> Tensor:
        return self.decoder(y)

    def hyper_encode(self, y: Tensor) -> Tensor:
        return self.hyper_encoder(y)

    def hyper_decode(self, z: Tensor) -> tuple[Tensor, Tensor]:
        return self.hyper_decoder(z)

    # -- parameter bookkeeping --------------------------------------------

    def encoder_parameter_names(self) -> list[str]:
        """Names of the latent-encoder group (the part frozen in phase 2)."""
        return [f"encoder.{n}" for n, _ in self.encoder.named_parameters()]

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        arrays = {name: p.data for name, p in self.named_parameters()}
        save_arrays(path, self.cfg.to_text(), arrays)

    @classmethod
    def load(cls, path) -> "CodecModel":
        config_text, arrays = load_arrays(path)
        cfg = ModelConfig.from_text(config_text)
        model = cls(cfg)
        names = [n for n, _ in model.named_parameters()]
        if names != list(arrays):
            missing = set(names) - set(arrays)
            extra = set(arrays) - set(names)
            raise CheckpointError(
                f"{path}: parameter set mismatch (missing {sorted(missing)[:3]}, "
                f"unexpected {sorted(extra)[:3]})")
        for name, p in model.named_parameters():
            if p.data.shape != arrays[name].shape:
                raise CheckpointError(
                    f"{path}: shape mismatch for {name}: checkpoint "
                    f"{arrays[name].shape}, model {p.data.shape}")
            p.data = arrays[name]
        return model
