"""Grid files, normalization statistics, and the synthetic dataset generator.

A grid instance is a float32 tensor of shape (C, H, W): C named channels on
a regular latitude-longitude grid, latitudes strictly decreasing (north to
south).  Files use the "GRD1" layout documented in FORMATS.md.

The generator produces atmosphere-like fields: a per-channel mean profile
proportional to cos(latitude), spectrally shaped correlated noise, sparse
heavy-tailed anomalies so extreme-value metrics have genuine extremes, and
linear cross-channel coupling.  Randomness comes from the counter-based
Philox generator keyed by (seed, split, instance), which makes every
instance reproducible on any platform and keeps the splits disjoint.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "DataError",
    "GridTensor",
    "default_latitudes",
    "default_longitudes",
    "write_grid",
    "read_grid",
    "NormStats",
    "compute_stats",
    "normalize",
    "denormalize",
    "SyntheticSpec",
    "generate_dataset",
    "instance_paths",
]

GRID_MAGIC = b"GRD1"
GRID_VERSION = 1

SPLIT_IDS = {"train": 0, "val": 1, "test": 2}
_PERSONALITY_STREAM = 3  # stream ids 0-2 are the splits


def stream_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    """Philox generator for (seed, stream, index); the dataset's only RNG.

    The 128-bit Philox key is (seed, stream << 48 | index), so streams and
    indices never collide for index < 2^48.
    """
    return np.random.Generator(np.random.Philox(key=[seed, (stream << 48) | index]))


class DataError(Exception):
    pass


def default_latitudes(h: int) -> np.ndarray:
    """Cell-center latitudes, strictly decreasing, poles excluded."""
    step = 180.0 / h
    return np.asarray(90.0 - step / 2 - step * np.arange(h), dtype=np.float64)


def default_longitudes(w: int) -> np.ndarray:
    step = 360.0 / w
    return np.asarray(step * np.arange(w), dtype=np.float64)


@dataclass
class GridTensor:
    """One timestamped multi-channel field on a regular lat-lon grid."""

    values: np.ndarray  # float32, (C, H, W)
    channels: tuple[str, ...]
    lat: np.ndarray  # float64, (H,), strictly decreasing
    lon: np.ndarray  # float64, (W,)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.lat = np.asarray(self.lat, dtype=np.float64)
        self.lon = np.asarray(self.lon, dtype=np.float64)
        self.channels = tuple(self.channels)
        c, h, w = self.values.shape
        if len(self.channels) != c:
            raise DataError(f"{len(self.channels)} channel names for {c} channels")
        if len(set(self.channels)) != c:
            raise DataError("channel names must be unique")
        if self.lat.shape != (h,) or self.lon.shape != (w,):
            raise DataError(f"coordinate lengths {self.lat.shape}/{self.lon.shape} "
                            f"do not match grid {h}x{w}")
        if not np.all(np.diff(self.lat) < 0):
            raise DataError("latitudes must be strictly decreasing")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


def write_grid(path, grid: GridTensor) -> None:
    c, h, w = grid.shape
    parts = [GRID_MAGIC, struct.pack("<HIII", GRID_VERSION, c, h, w),
             struct.pack("<H", c)]
    for name in grid.channels:
        nm = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nm)))
        parts.append(nm)
    parts.append(grid.lat.astype("<f8").tobytes())
    parts.append(grid.lon.astype("<f8").tobytes())
    payload = np.ascontiguousarray(grid.values).astype("<f4", copy=False).tobytes()
    parts.append(payload)
    parts.append(struct.pack("<I", zlib.crc32(payload)))
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def read_grid(path) -> GridTensor:
    with open(path, "rb") as f:
        blob = f.read()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise DataError(f"{path}: truncated at byte {pos} reading {what}")
        out = blob[pos:pos + n]
        pos += n
        return out

    if take(4, "magic") != GRID_MAGIC:
        raise DataError(f"{path}: bad magic, not a grid file")
    version, c, h, w = struct.unpack("<HIII", take(14, "header"))
    if version != GRID_VERSION:
        raise DataError(f"{path}: unsupported grid version {version}")
    if c == 0 or h == 0 or w == 0:
        raise DataError(f"{path}: zero dimension in header ({c},{h},{w})")
    (n_names,) = struct.unpack("<H", take(2, "name count"))
    if n_names != c:
        raise DataError(f"{path}: {n_names} channel names for {c} channels")
    names = []
    for i in range(c):
        (ln,) = struct.unpack("<H", take(2, f"name {i} length"))
        try:
            names.append(take(ln, f"name {i}").decode("utf-8"))
        except UnicodeDecodeError as e:
            raise DataError(f"{path}: channel name {i} is not valid UTF-8") from e
    lat = np.frombuffer(take(8 * h, "latitudes"), dtype="<f8").copy()
    lon = np.frombuffer(take(8 * w, "longitudes"), dtype="<f8").copy()
    payload = take(4 * c * h * w, "payload")
    (crc,) = struct.unpack("<I", take(4, "checksum"))
    if zlib.crc32(payload) != crc:
        raise DataError(f"{path}: payload CRC mismatch")
    if pos != len(blob):
        raise DataError(f"{path}: {len(blob) - pos} trailing bytes after checksum")
    values = np.frombuffer(payload, dtype="<f4").reshape(c, h, w).copy()
    return GridTensor(values, tuple(names), lat, lon)


# ---------------------------------------------------------------------------
# Normalization statistics


@dataclass
class NormStats:
    """Per-channel mean and std over the training split."""

    channels: tuple[str, ...]
    mean: np.ndarray  # float64, (C,)
    std: np.ndarray  # float64, (C,), > 0

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(self.std <= 0):
            raise DataError("normalization std must be positive for every channel")

    def canonical_text(self) -> str:
        """Exact serialization; hex floats so the hash is platform-stable."""
        lines = [f"stats v1 channels {len(self.channels)}"]
        for name, m, s in zip(self.channels, self.mean, self.std):
            lines.append(f"channel {name} mean {float(m).hex()} std {float(s).hex()}")
        return "\n".join(lines) + "\n"

    def hash(self) -> bytes:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).digest()

    def save(self, path) -> None:
        Path(path).write_text(self.canonical_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "NormStats":
        lines = Path(path).read_text(encoding="utf-8").strip().split("\n")
        head = lines[0].split()
        if head[:2] != ["stats", "v1"] or len(head) != 4:
            raise DataError(f"{path}: malformed stats header {lines[0]!r}")
        c = int(head[3])
        if len(lines) != c + 1:
            raise DataError(f"{path}: expected {c} channel lines, found {len(lines) - 1}")
        names, means, stds = [], [], []
        for ln in lines[1:]:
            toks = ln.split()
            if len(toks) != 6 or toks[0] != "channel" or toks[2] != "mean" or toks[4] != "std":
                raise DataError(f"{path}: malformed stats line {ln!r}")
            names.append(toks[1])
            means.append(float.fromhex(toks[3]))
            stds.append(float.fromhex(toks[5]))
        return cls(tuple(names), np.array(means), np.array(stds))


def compute_stats(grids, streaming: bool = True) -> NormStats:
    """Per-channel mean/std over an iterable of GridTensors.

    ``streaming=True`` uses Welford accumulation in one pass; ``False``
    materializes everything and does the textbook two-pass computation.  The
    two agree to float64 rounding and exist to cross-check each other.
    """
    grids = list(grids)
    if not grids:
        raise DataError("compute_stats: empty split")
    channels = grids[0].channels
    for g in grids:
        if g.channels != channels:
            raise DataError("compute_stats: inconsistent channel names across instances")
    c = len(channels)
    if streaming:
        count = 0
        mean = np.zeros(c)
        m2 = np.zeros(c)
        for g in grids:
            flat = g.values.reshape(c, -1).astype(np.float64)
            n = flat.shape[1]
            b_mean = flat.mean(axis=1)
            b_m2 = ((flat - b_mean[:, None]) ** 2).sum(axis=1)
            delta = b_mean - mean
            total = count + n
            mean = mean + delta * (n / total)
            m2 = m2 + b_m2 + delta**2 * (count * n / total)
            count = total
        var = m2 / count
    else:
        stack = np.concatenate([g.values.reshape(c, -1).astype(np.float64) for g in grids],
                               axis=1)
        mean = stack.mean(axis=1)
        var = ((stack - mean[:, None]) ** 2).mean(axis=1)
    if np.any(var <= 0):
        bad = channels[int(np.argmin(var))]
        raise DataError(f"channel {bad!r} has zero variance; cannot normalize")
    return NormStats(channels, mean, np.sqrt(var))


def _check_channels(grid_channels, stats: NormStats) -> None:
    if tuple(grid_channels) != stats.channels:
        raise DataError(f"channel mismatch: grid {grid_channels} vs stats {stats.channels}")


def normalize(grid: GridTensor, stats: NormStats) -> GridTensor:
    _check_channels(grid.channels, stats)
    vals = (grid.values.astype(np.float64) - stats.mean[:, None, None]) / stats.std[:, None, None]
    return GridTensor(vals.astype(np.float32), grid.channels, grid.lat, grid.lon)


def denormalize(grid: GridTensor, stats: NormStats) -> GridTensor:
    _check_channels(grid.channels, stats)
    vals = grid.values.astype(np.float64) * stats.std[:, None, None] + stats.mean[:, None, None]
    return GridTensor(vals.astype(np.float32), grid.channels, grid.lat, grid.lon)


# ---------------------------------------------------------------------------
# Synthetic dataset


@dataclass
class SyntheticSpec:
    """Parameters of the synthetic atmosphere-like dataset.

    Per-channel personalities (profile amplitude and offset, noise scale,
    spectral slope) are drawn once from ``seed`` so the dataset is fully
    determined by this record.  ``coupling`` linearly mixes the channel
    noise fields; the default couples each channel to its neighbor.
    """

    seed: int = 0
    channels: int = 8
    grid_h: int = 32
    grid_w: int = 64
    n_train: int = 200
    n_val: int = 16
    n_test: int = 16
    spectral_slope: float = 3.0  # energy ~ k^-slope; higher = smoother
    lat_amplitude: float = 2.0  # scale of the cos(latitude) mean profile
    noise_scale: float = 0.6
    anomaly_rate: float = 0.004  # expected anomaly centers per pixel
    anomaly_scale: float = 2.5
    coupling_strength: float = 0.25

    def __post_init__(self):
        if self.grid_h < 4 or self.grid_w < 8:
            raise DataError("synthetic grid must be at least 4 x 8")
        if self.channels < 1:
            raise DataError("need at least one channel")

    def channel_names(self) -> tuple[str, ...]:
        return tuple(f"ch{i:02d}" for i in range(self.channels))

    def split_sizes(self) -> dict[str, int]:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}

    def coupling(self) -> np.ndarray:
        c = self.channels
        m = np.eye(c)
        for i in range(c):
            m[i, (i + 1) % c] += self.coupling_strength
        return m

    def personalities(self) -> dict[str, np.ndarray]:
        rng = stream_rng(self.seed, _PERSONALITY_STREAM, 0)
        c = self.channels
        return {
            "amp": self.lat_amplitude * rng.uniform(0.5, 1.5, size=c),
            "offset": rng.uniform(-1.0, 1.0, size=c),
            "noise": self.noise_scale * rng.uniform(0.6, 1.4, size=c),
            "slope": self.spectral_slope + rng.uniform(-0.5, 0.5, size=c),
        }


def _spectral_noise(rng: np.random.Generator, h: int, w: int, slope: float) -> np.ndarray:
    """Unit-variance field whose power spectrum falls off as k^-slope."""
    white = rng.normal(size=(h, w))
    ky = np.fft.fftfreq(h)[:, None]
    kx = np.fft.fftfreq(w)[None, :]
    k = np.sqrt(kx**2 + ky**2)
    amp = np.zeros_like(k)
    amp[k > 0] = k[k > 0] ** (-slope / 2.0)
    shaped = np.fft.ifft2(np.fft.fft2(white) * amp).real
    return shaped / shaped.std()


def _anomalies(rng: np.random.Generator, h: int, w: int, rate: float,
               scale: float) -> np.ndarray:
    """Sparse heavy-tailed bumps with a small Gaussian footprint."""
    out = np.zeros((h, w))
    n = rng.poisson(rate * h * w)
    if n == 0:
        return out
    rows = rng.integers(0, h, size=n)
    cols = rng.integers(0, w, size=n)
    amps = scale * rng.standard_t(df=3, size=n)
    yy, xx = np.mgrid[-2:3, -2:3]
    bump = np.exp(-(yy**2 + xx**2) / 2.0)
    for r, c, a in zip(rows, cols, amps):
        rs = (np.arange(r - 2, r + 3) % h)
        cs = (np.arange(c - 2, c + 3) % w)
        out[np.ix_(rs, cs)] += a * bump
    return out


def make_instance(spec: SyntheticSpec, split: str, index: int) -> GridTensor:
    """Generate one instance; a pure function of (spec, split, index)."""
    if split not in SPLIT_IDS:
        raise DataError(f"unknown split {split!r}")
    rng = stream_rng(spec.seed, SPLIT_IDS[split], index)
    c, h, w = spec.channels, spec.grid_h, spec.grid_w
    pers = spec.personalities()
    lat = default_latitudes(h)
    cos_profile = np.cos(np.deg2rad(lat))[:, None]

    noise = np.stack([pers["noise"][i] * _spectral_noise(rng, h, w, pers["slope"][i])
                      for i in range(c)])
    mixed = np.einsum("cd,dhw->chw", spec.coupling(), noise)
    anomalies = np.stack([_anomalies(rng, h, w, spec.anomaly_rate, spec.anomaly_scale)
                          for _ in range(c)])
    base = pers["amp"][:, None, None] * cos_profile + pers["offset"][:, None, None]
    values = base + mixed + anomalies
    return GridTensor(values.astype(np.float32), spec.channel_names(), lat,
                      default_longitudes(w))


def instance_paths(root, split: str, count: int) -> list[Path]:
    return [Path(root) / split / f"{split}_{i:05d}.grd" for i in range(count)]


def generate_dataset(spec: SyntheticSpec, root) -> dict[str, list[Path]]:
    """Write all splits under ``root``; returns the file lists per split."""
    root = Path(root)
    out: dict[str, list[Path]] = {}
    for split, count in spec.split_sizes().items():
        paths = instance_paths(root, split, count)
        (root / split).mkdir(parents=True, exist_ok=True)
        for i, path in enumerate(paths):
            write_grid(path, make_instance(spec, split, i))
        out[split] = paths
    return out
