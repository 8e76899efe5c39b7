"""Window and global attention blocks.

Token maps are laid out channels-last, ``(B, H, W, D)``: every position of
the H x W grid carries a D-dimensional token.  A window partition groups
tokens into non-overlapping rectangles so attention cost stays quadratic in
the window size instead of the grid size.  Three window shapes are used in
sequence, square, east-west elongated, and north-south elongated, followed
by one full-grid attention block; that four-block unit is a :class:`Stage`.

Partition and merge are pure reshape/permute, so merging after partitioning
returns the identical array bit for bit.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import LayerNorm, Linear, Mlp, Module

__all__ = [
    "WindowSpec",
    "partition_windows",
    "merge_windows",
    "attention",
    "counting_scores",
    "MultiHeadAttention",
    "TokenBlock",
    "WindowBlock",
    "GlobalBlock",
    "Stage",
]


@dataclass(frozen=True)
class WindowSpec:
    """Shape of an attention window.

    ``kind`` is one of ``square`` (win_h == win_w), ``ew`` (wider than tall)
    or ``ns`` (taller than wide); the constructor enforces the match between
    kind and aspect so configs cannot silently swap the elongated pair.
    """

    kind: str
    win_h: int
    win_w: int

    def __post_init__(self):
        if self.kind not in ("square", "ew", "ns"):
            raise ValueError(f"unknown window kind {self.kind!r}")
        if self.win_h < 1 or self.win_w < 1:
            raise ValueError("window sides must be positive")
        if self.kind == "square" and self.win_h != self.win_w:
            raise ValueError(f"square window must have equal sides, got {self.win_h}x{self.win_w}")
        if self.kind == "ew" and not self.win_w > self.win_h:
            raise ValueError(f"ew window must be wider than tall, got {self.win_h}x{self.win_w}")
        if self.kind == "ns" and not self.win_h > self.win_w:
            raise ValueError(f"ns window must be taller than wide, got {self.win_h}x{self.win_w}")

    @property
    def tokens(self) -> int:
        return self.win_h * self.win_w

    def grid_windows(self, h: int, w: int) -> int:
        if h % self.win_h or w % self.win_w:
            raise ValueError(
                f"grid {h}x{w} not divisible by {self.kind} window {self.win_h}x{self.win_w}"
            )
        return (h // self.win_h) * (w // self.win_w)


def partition_windows(x: Tensor, spec: WindowSpec) -> Tensor:
    """(B, H, W, D) -> (B * n_windows, win_h * win_w, D).

    Windows are ordered row-major over the window grid, tokens row-major
    inside each window.  The grid must divide evenly; there is no padding or
    shifting.
    """
    b, h, w, d = x.shape
    spec.grid_windows(h, w)
    nh, nw = h // spec.win_h, w // spec.win_w
    x = ad.reshape(x, (b, nh, spec.win_h, nw, spec.win_w, d))
    x = ad.permute(x, (0, 1, 3, 2, 4, 5))
    return ad.reshape(x, (b * nh * nw, spec.tokens, d))


def merge_windows(x: Tensor, spec: WindowSpec, grid_hw: tuple[int, int]) -> Tensor:
    """Exact inverse of :func:`partition_windows` for the same spec and grid."""
    h, w = grid_hw
    nh, nw = h // spec.win_h, w // spec.win_w
    bn, t, d = x.shape
    if t != spec.tokens or bn % (nh * nw):
        raise ValueError(f"window batch {x.shape} inconsistent with grid {h}x{w} and {spec}")
    b = bn // (nh * nw)
    x = ad.reshape(x, (b, nh, nw, spec.win_h, spec.win_w, d))
    x = ad.permute(x, (0, 1, 3, 2, 4, 5))
    return ad.reshape(x, (b, h, w, d))


_SCORE_COUNT: list | None = None


@contextlib.contextmanager
def counting_scores():
    """Count pairwise attention scores computed inside the block.

    Yields a single-element list whose entry is the running total; used by
    tests to confirm window attention does exactly sum(windows) * t^2 score
    evaluations and not full-grid work.
    """
    global _SCORE_COUNT
    prev = _SCORE_COUNT
    holder = [0]
    _SCORE_COUNT = holder
    try:
        yield holder
    finally:
        _SCORE_COUNT = prev


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over batched sequences, shapes (B, n, d)."""
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ValueError("attention expects (batch, tokens, dim) operands")
    d = q.shape[-1]
    scores = ad.matmul(q, ad.permute(k, (0, 2, 1)))
    scores = ad.mul(scores, 1.0 / math.sqrt(d))
    if _SCORE_COUNT is not None:
        _SCORE_COUNT[0] += int(np.prod(scores.shape))
    return ad.matmul(ad.softmax(scores, axis=-1), v)


class MultiHeadAttention(Module):
    """Heads computed in parallel from shared projections, outputs concatenated.

    Equivalent to running each head with its own slice of the projection
    matrices and concatenating before the output projection.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.proj_q = Linear(dim, dim, rng)
        self.proj_k = Linear(dim, dim, rng)
        self.proj_v = Linear(dim, dim, rng)
        self.proj_out = Linear(dim, dim, rng)

    def _split_heads(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        x = ad.reshape(x, (b, n, self.heads, self.head_dim))
        x = ad.permute(x, (0, 2, 1, 3))
        return ad.reshape(x, (b * self.heads, n, self.head_dim))

    def __call__(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        out = attention(self._split_heads(self.proj_q(x)),
                        self._split_heads(self.proj_k(x)),
                        self._split_heads(self.proj_v(x)))
        out = ad.reshape(out, (b, self.heads, n, self.head_dim))
        out = ad.permute(out, (0, 2, 1, 3))
        return self.proj_out(ad.reshape(out, (b, n, self.dim)))


class TokenBlock(Module):
    """Pre-norm transformer block on token sequences (B, n, D)."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio * dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = ad.add(x, self.attn(self.norm1(x)))
        return ad.add(x, self.mlp(self.norm2(x)))


class WindowBlock(Module):
    """TokenBlock applied independently inside each window of the grid."""

    def __init__(self, dim: int, heads: int, spec: WindowSpec, mlp_ratio: int,
                 rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        self.block = TokenBlock(dim, heads, mlp_ratio, rng)

    def __call__(self, x: Tensor) -> Tensor:
        _, h, w, _ = x.shape
        out = self.block(partition_windows(x, self.spec))
        return merge_windows(out, self.spec, (h, w))


class GlobalBlock(Module):
    """TokenBlock over the full flattened grid; mixes across all windows."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        super().__init__()
        self.block = TokenBlock(dim, heads, mlp_ratio, rng)

    def __call__(self, x: Tensor) -> Tensor:
        b, h, w, d = x.shape
        out = self.block(ad.reshape(x, (b, h * w, d)))
        return ad.reshape(out, (b, h, w, d))


class Stage(Module):
    """Square, east-west, north-south window blocks, then one global block."""

    def __init__(self, dim: int, heads: int, windows, mlp_ratio: int,
                 rng: np.random.Generator):
        super().__init__()
        specs = list(windows)
        kinds = [s.kind for s in specs]
        if kinds != ["square", "ew", "ns"]:
            raise ValueError(f"stage needs windows in order square, ew, ns; got {kinds}")
        self.register_list("window_blocks",
                           [WindowBlock(dim, heads, s, mlp_ratio, rng) for s in specs])
        self.global_block = GlobalBlock(dim, heads, mlp_ratio, rng)

    def __call__(self, x: Tensor) -> Tensor:
        for blk in self.window_blocks:
            x = blk(x)
        return self.global_block(x)
