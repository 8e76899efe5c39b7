"""Checkpoint file format: named float32 arrays plus a config text block.

Layout (all integers little-endian, see FORMATS.md):

    magic "CVCP" | version u16 | config_len u32 | config utf-8 |
    n_arrays u32 | manifest entries | payload_len u64 | payload | crc32 u32

Each manifest entry is ``name_len u16, name utf-8, ndim u8, dims u32 * ndim,
offset u64``; offsets index into the payload, which is the concatenation of
the arrays' raw little-endian float32 bytes in manifest order.  The config
text is the canonical serialized model config; its sha256 is the hash that
containers and checkpoints are matched by.
"""

from __future__ import annotations

import hashlib
import struct
import zlib

import numpy as np

__all__ = ["save_arrays", "load_arrays", "config_hash", "CheckpointError"]

MAGIC = b"CVCP"
VERSION = 1


class CheckpointError(Exception):
    pass


def config_hash(config_text: str) -> bytes:
    """sha256 of the canonical config text; 32 bytes."""
    return hashlib.sha256(config_text.encode("utf-8")).digest()


def save_arrays(path, config_text: str, arrays: dict[str, np.ndarray]) -> None:
    """Write ``arrays`` (all float32) with ``config_text`` to ``path``."""
    parts = [MAGIC, struct.pack("<H", VERSION)]
    cfg = config_text.encode("utf-8")
    parts.append(struct.pack("<I", len(cfg)))
    parts.append(cfg)
    parts.append(struct.pack("<I", len(arrays)))
    payload = bytearray()
    for name, arr in arrays.items():
        if arr.dtype != np.float32:
            raise CheckpointError(f"array {name!r} must be float32, got {arr.dtype}")
        raw = np.ascontiguousarray(arr).astype("<f4", copy=False).tobytes()
        nm = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nm)))
        parts.append(nm)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<Q", len(payload)))
        payload.extend(raw)
    parts.append(struct.pack("<Q", len(payload)))
    parts.append(bytes(payload))
    parts.append(struct.pack("<I", zlib.crc32(bytes(payload))))
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def _decode_utf8(raw: bytes, path, what: str) -> str:
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise CheckpointError(f"{path}: {what} is not valid UTF-8") from e


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos} (wanted {n} more)")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals


def load_arrays(path) -> tuple[str, dict[str, np.ndarray]]:
    """Read a checkpoint; returns (config_text, name -> float32 array)."""
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    version = r.unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    cfg = _decode_utf8(r.take(r.unpack("<I")), path, "config")
    n_arrays = r.unpack("<I")
    manifest = []
    for _ in range(n_arrays):
        name = _decode_utf8(r.take(r.unpack("<H")), path, "array name")
        ndim = r.unpack("<B")
        shape = tuple(struct.unpack(f"<{ndim}I", r.take(4 * ndim))) if ndim else ()
        offset = r.unpack("<Q")
        manifest.append((name, shape, offset))
    payload_len = r.unpack("<Q")
    payload = r.take(payload_len)
    crc = r.unpack("<I")
    if zlib.crc32(payload) != crc:
        raise CheckpointError(f"{path}: payload checksum (CRC32) mismatch")
    if r.pos != len(r.blob):
        raise CheckpointError(f"{path}: {len(r.blob) - r.pos} trailing bytes after checksum")
    arrays: dict[str, np.ndarray] = {}
    for name, shape, offset in manifest:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > payload_len:
            raise CheckpointError(f"{path}: array {name!r} extends past payload end")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        arrays[name] = arr.reshape(shape).astype(np.float32)
    return cfg, arrays
