"""Compressed-instance container: framed metadata plus coded payloads.

Layout (little-endian throughout, see FORMATS.md):

    magic "CVC1" | version u16 |
    C u16 | H u32 | W u32 |
    n_names u16 | { name_len u16 | name utf-8 } * n_names |
    stats_hash 32B | config_hash 32B |
    lambda f64 | mode u8 |
    z_len u32 | y_len u32 | z_crc u32 | y_crc u32 |
    header_crc u32 |
    z payload | y payload

``header_crc`` covers every byte before it, so any single-byte tamper in
the file is caught either there or by a payload CRC.  ``mode`` selects the
coding path: 0 codes y conditionally on the transmitted hyper-latent z,
1 codes y directly under the checkpoint's factorized prior (the ablation
baseline; the z payload is then empty).

The lossy boundary is quantization: the coded integer latents decode back
bit-for-bit, so the decompressed field equals the encoder-side quantized
reconstruction exactly.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .coding.coder import CoderError, decode_symbols, encode_symbols
from .coding.gaussian import GaussianTableCache
from .coding.quantize import quantize_infer
from .data import GridTensor, NormStats, default_latitudes, default_longitudes, denormalize, normalize
from .model import CodecModel
from .nn.autodiff import tensor

__all__ = [
    "compress",
    "decompress",
    "decode_latents",
    "CompressionReport",
    "ContainerError",
    "MODE_CONDITIONAL",
    "MODE_FACTORIZED",
]

MAGIC = b"CVC1"
VERSION = 1
MODE_CONDITIONAL = 0
MODE_FACTORIZED = 1

# Fraction of clamped symbols above which the report carries a warning.
CLAMP_WARN_FRACTION = 1e-3


class ContainerError(Exception):
    pass


@dataclass
class CompressionReport:
    mode: int
    header_bytes: int
    z_bytes: int
    y_bytes: int
    total_bytes: int
    source_bytes: int
    bits_per_value: float
    ratio: float
    y_symbols: int
    z_symbols: int
    clamped_y: int
    clamped_z: int
    warnings: list[str] = field(default_factory=list)

    def summary(self) -> str:
        lines = [
            f"mode: {'conditional' if self.mode == MODE_CONDITIONAL else 'factorized'}",
            f"bytes: {self.total_bytes} (header {self.header_bytes}, "
            f"z {self.z_bytes}, y {self.y_bytes})",
            f"bits/value: {self.bits_per_value:.4f}",
            f"ratio: {self.ratio:.2f}",
            f"clamped: y {self.clamped_y}/{self.y_symbols}, z {self.clamped_z}/{self.z_symbols}",
        ]
        lines.extend(f"warning: {w}" for w in self.warnings)
        return "\n".join(lines)


def _code_with_gaussian(values: np.ndarray, mu: np.ndarray, sigma: np.ndarray,
                        cache: GaussianTableCache) -> bytes:
    m, j = cache.keys_for(mu.ravel(), sigma.ravel())
    tables = [cache.table(mi, ji) for mi, ji in zip(m, j)]
    indices = cache.alphabet.index_of(values.ravel())
    return encode_symbols(indices, lambda i: tables[i])


def _decode_with_gaussian(blob: bytes, n: int, mu: np.ndarray, sigma: np.ndarray,
                          cache: GaussianTableCache, shape) -> np.ndarray:
    m, j = cache.keys_for(mu.ravel(), sigma.ravel())
    tables = [cache.table(mi, ji) for mi, ji in zip(m, j)]
    indices = decode_symbols(blob, n, lambda i: tables[i])
    values = indices + cache.alphabet.s_min
    return values.reshape(shape)


def _latent_fields(model: CodecModel, z_hat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Coding distribution for y as a function of decoded z only."""
    mu, sigma = model.hyper_decode(tensor(z_hat.astype(np.float32)[None]))
    return mu.data[0].astype(np.float64), sigma.data[0].astype(np.float64)


def compress(grid: GridTensor, model: CodecModel, stats: NormStats,
             mode: int = MODE_CONDITIONAL) -> tuple[bytes, CompressionReport]:
    """Encode one instance; returns (container bytes, report)."""
    cfg = model.cfg
    if mode not in (MODE_CONDITIONAL, MODE_FACTORIZED):
        raise ContainerError(f"unknown mode {mode}")
    if grid.values.shape != (cfg.channels, cfg.height, cfg.width):
        raise ContainerError(
            f"grid shape {grid.values.shape} does not match model "
            f"({cfg.channels}, {cfg.height}, {cfg.width})")
    x_n = normalize(grid, stats).values[None]
    cache = GaussianTableCache()
    lo, hi = cache.alphabet.s_min, cache.alphabet.s_max

    mu_x, _ = model.encode_latent(tensor(x_n))
    y = mu_x.data[0].astype(np.float64)
    y_hat, clamped_y = _quantize(y, lo, hi)

    if mode == MODE_CONDITIONAL:
        z = model.hyper_encode(tensor(mu_x.data)).data[0].astype(np.float64)
        z_hat, clamped_z = _quantize(z, lo, hi)
        pz_mu, pz_sigma = model.z_prior.fields(z_hat.shape)
        z_blob = _code_with_gaussian(z_hat, pz_mu, pz_sigma, cache)
        mu_y, sigma_y = _latent_fields(model, z_hat)
        y_blob = _code_with_gaussian(y_hat, mu_y, sigma_y, cache)
        z_symbols = z_hat.size
    else:
        z_hat, clamped_z, z_symbols = None, 0, 0
        z_blob = b""
        py_mu, py_sigma = model.y_prior.fields(y_hat.shape)
        y_blob = _code_with_gaussian(y_hat, py_mu, py_sigma, cache)

    header = _pack_header(grid.channels, cfg, stats, mode, len(z_blob), len(y_blob),
                          zlib.crc32(z_blob), zlib.crc32(y_blob))
    blob = header + z_blob + y_blob

    source_bytes = grid.values.size * grid.values.dtype.itemsize
    report = CompressionReport(
        mode=mode, header_bytes=len(header), z_bytes=len(z_blob), y_bytes=len(y_blob),
        total_bytes=len(blob), source_bytes=source_bytes,
        bits_per_value=8.0 * len(blob) / grid.values.size,
        ratio=source_bytes / len(blob),
        y_symbols=y_hat.size, z_symbols=z_symbols,
        clamped_y=clamped_y, clamped_z=clamped_z)
    total_symbols = y_hat.size + z_symbols
    if (clamped_y + clamped_z) > CLAMP_WARN_FRACTION * total_symbols:
        report.warnings.append(
            f"{clamped_y + clamped_z} of {total_symbols} symbols clamped to the "
            f"coder range [{lo}, {hi}]; reconstruction may degrade")
    return blob, report


def _quantize(v: np.ndarray, lo: int, hi: int) -> tuple[np.ndarray, int]:
    return quantize_infer(v, lo, hi)


def _pack_header(names, cfg, stats, mode, z_len, y_len, z_crc, y_crc) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION),
             struct.pack("<HII", cfg.channels, cfg.height, cfg.width),
             struct.pack("<H", len(names))]
    for name in names:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
    parts.append(stats.hash())
    parts.append(cfg.hash())
    parts.append(struct.pack("<d", cfg.lambda_rd))
    parts.append(struct.pack("<B", mode))
    parts.append(struct.pack("<IIII", z_len, y_len, z_crc, y_crc))
    head = b"".join(parts)
    return head + struct.pack("<I", zlib.crc32(head))


class _Header:
    __slots__ = ("channels", "height", "width", "names", "stats_hash",
                 "config_hash", "lambda_rd", "mode", "z_len", "y_len",
                 "z_crc", "y_crc", "size")


def _parse_header(blob: bytes) -> _Header:
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise ContainerError(f"truncated container in {what} at byte {pos}")
        out = blob[pos:pos + n]
        pos += n
        return out

    h = _Header()
    if take(4, "magic") != MAGIC:
        raise ContainerError("bad magic, not a compressed-instance container")
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    h.channels, h.height, h.width = struct.unpack("<HII", take(10, "dims"))
    (n_names,) = struct.unpack("<H", take(2, "name count"))
    if n_names != h.channels:
        raise ContainerError(f"{n_names} channel names for {h.channels} channels")
    names = []
    for i in range(n_names):
        (ln,) = struct.unpack("<H", take(2, "name length"))
        raw = take(ln, "channel name")
        try:
            names.append(raw.decode("utf-8"))
        except UnicodeDecodeError as e:
            raise ContainerError(f"channel name {i} is not valid UTF-8") from e
    h.names = tuple(names)
    h.stats_hash = take(32, "stats hash")
    h.config_hash = take(32, "config hash")
    (h.lambda_rd,) = struct.unpack("<d", take(8, "lambda"))
    (h.mode,) = struct.unpack("<B", take(1, "mode"))
    if h.mode not in (MODE_CONDITIONAL, MODE_FACTORIZED):
        raise ContainerError(f"unknown coding mode {h.mode}")
    h.z_len, h.y_len, h.z_crc, h.y_crc = struct.unpack("<IIII", take(16, "payload table"))
    (header_crc,) = struct.unpack("<I", take(4, "header checksum"))
    if zlib.crc32(blob[:pos - 4]) != header_crc:
        raise ContainerError("header checksum (CRC32) mismatch")
    h.size = pos
    if len(blob) != pos + h.z_len + h.y_len:
        raise ContainerError(
            f"container is {len(blob)} bytes; header promises {pos + h.z_len + h.y_len}")
    return h


def _check_payloads(blob: bytes, h: _Header) -> tuple[bytes, bytes]:
    z_blob = blob[h.size:h.size + h.z_len]
    y_blob = blob[h.size + h.z_len:]
    if zlib.crc32(z_blob) != h.z_crc:
        raise ContainerError("hyper-latent payload checksum (CRC32) mismatch")
    if zlib.crc32(y_blob) != h.y_crc:
        raise ContainerError("latent payload checksum (CRC32) mismatch")
    return z_blob, y_blob


def decode_latents(blob: bytes, model: CodecModel) -> dict:
    """Decode the integer latents without running the reconstruction decoder.

    Returns ``{"mode", "y_hat", "z_hat"}`` with ``z_hat`` None in
    factorized mode.  Validates everything except the stats hash (no stats
    needed at this layer).
    """
    cfg = model.cfg
    h = _parse_header(blob)
    if h.config_hash != cfg.hash():
        raise ContainerError("model-config hash mismatch: container was written "
                             "by a different architecture or seed")
    if (h.channels, h.height, h.width) != (cfg.channels, cfg.height, cfg.width):
        raise ContainerError(
            f"container grid ({h.channels}, {h.height}, {h.width}) does not match "
            f"model ({cfg.channels}, {cfg.height}, {cfg.width})")
    z_blob, y_blob = _check_payloads(blob, h)
    cache = GaussianTableCache()
    gh, gw = cfg.token_grid
    hh, hw = cfg.hyper_grid
    try:
        if h.mode == MODE_CONDITIONAL:
            pz_mu, pz_sigma = model.z_prior.fields((cfg.hyper_latent_channels, hh, hw))
            z_hat = _decode_with_gaussian(
                z_blob, cfg.hyper_latent_channels * hh * hw, pz_mu, pz_sigma, cache,
                (cfg.hyper_latent_channels, hh, hw))
            mu_y, sigma_y = _latent_fields(model, z_hat)
            y_hat = _decode_with_gaussian(
                y_blob, cfg.latent_channels * gh * gw, mu_y, sigma_y, cache,
                (cfg.latent_channels, gh, gw))
        else:
            if h.z_len:
                raise ContainerError("factorized-mode container carries a z payload")
            z_hat = None
            py_mu, py_sigma = model.y_prior.fields((cfg.latent_channels, gh, gw))
            y_hat = _decode_with_gaussian(
                y_blob, cfg.latent_channels * gh * gw, py_mu, py_sigma, cache,
                (cfg.latent_channels, gh, gw))
    except CoderError as e:
        raise ContainerError(f"payload does not decode: {e}") from e
    return {"mode": h.mode, "y_hat": y_hat, "z_hat": z_hat}


def decompress(blob: bytes, model: CodecModel, stats: NormStats) -> GridTensor:
    """Decode a container back to a reconstructed field.

    The returned grid carries the channel names from the container and the
    default equiangular coordinates (the container stores none).
    """
    h = _parse_header(blob)
    if h.stats_hash != stats.hash():
        raise ContainerError("normalization-stats hash mismatch: wrong stats file")
    latents = decode_latents(blob, model)
    y_hat = latents["y_hat"]
    x_n = model.decode_reconstruction(tensor(y_hat.astype(np.float32)[None])).data[0]
    grid_n = GridTensor(x_n, h.names, default_latitudes(h.height),
                        default_longitudes(h.width))
    return denormalize(grid_n, stats)
