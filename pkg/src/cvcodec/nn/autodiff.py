"""Reverse-mode automatic differentiation over numpy arrays.

A small tape-based engine: ops execute eagerly on numpy arrays and, when a
tape is active, append a record holding the backward closure.  Calling
``Tape.backward`` walks the records in reverse and accumulates gradients
into every tensor that requires them.  Each record is visited exactly once,
so shared subexpressions receive summed gradients.

Arrays are float32 in normal use.  The finite-difference checker
(:func:`gradcheck`) re-runs the computation in float64; ops preserve the
dtype of their inputs, so no separate "check mode" switch is needed.

Shape discipline is strict: binary ops require operands of identical shape,
or a python scalar.  Broadcasting must be spelled out with
:func:`broadcast_to`.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special as _sp

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "exp",
    "log",
    "sqrt",
    "square",
    "erf",
    "tanh",
    "softplus",
    "gelu",
    "clamp",
    "softmax",
    "layer_norm",
    "tsum",
    "tmean",
    "reshape",
    "permute",
    "broadcast_to",
    "gradcheck",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)
_TWO_INV_SQRTPI = 2.0 / math.sqrt(math.pi)


class Tensor:
    """Array plus gradient slot.

    ``data`` is a numpy array (float32 unless the caller says otherwise),
    ``grad`` is filled in by :meth:`Tape.backward` for tensors with
    ``requires_grad`` set and for intermediates that need it.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A view of the same data with the graph connection severed."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # Operator sugar; all routed through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    """Make a Tensor, converting ``data`` to ``dtype`` (float32 by default)."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


class _Record:
    __slots__ = ("inputs", "out", "backward")

    def __init__(self, inputs, out, backward):
        self.inputs = inputs
        self.out = out
        self.backward = backward


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Records ops executed inside its ``with`` block.

    Use as::

        with Tape() as tape:
            loss = model_loss(...)
        tape.backward(loss)

    Outside any tape, ops run without recording, which doubles as inference
    mode.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._prev = None

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        return False

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every recorded tensor.

        ``loss`` must be a scalar produced inside this tape.  Gradients add
        onto whatever is already in ``grad``; call :meth:`zero_grads` or an
        optimizer step between backward passes.
        """
        if loss.data.shape != ():
            raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if loss.grad is None:
            loss.grad = np.ones((), dtype=loss.data.dtype)
        else:
            loss.grad = loss.grad + np.ones((), dtype=loss.data.dtype)
        for rec in reversed(self._records):
            g = rec.out.grad
            if g is None:
                continue  # this subgraph does not feed the loss
            grads = rec.backward(g)
            for t, gt in zip(rec.inputs, grads):
                if gt is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = gt
                else:
                    t.grad = t.grad + gt
        # The tape is consumed: intermediates are one-shot, only leaf grads
        # are meant to outlive this call.
        self._records.clear()


def _emit(out_data, inputs, backward) -> Tensor:
    out = Tensor(out_data)
    tape = _ACTIVE_TAPE
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._records.append(_Record(tuple(inputs), out, backward))
    return out


def _check_same_shape(a: Tensor, b: Tensor, opname: str) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(
            f"{opname}: shapes {a.data.shape} and {b.data.shape} differ; "
            "use broadcast_to explicitly"
        )


# ---------------------------------------------------------------------------
# Arithmetic


def add(a, b) -> Tensor:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        _check_same_shape(a, b, "add")
        return _emit(a.data + b.data, (a, b), lambda g: (g, g))
    if isinstance(a, Tensor):
        c = float(b)
        return _emit(a.data + c, (a,), lambda g: (g,))
    c = float(a)
    return _emit(c + b.data, (b,), lambda g: (g,))


def sub(a, b) -> Tensor:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        _check_same_shape(a, b, "sub")
        return _emit(a.data - b.data, (a, b), lambda g: (g, -g))
    if isinstance(a, Tensor):
        c = float(b)
        return _emit(a.data - c, (a,), lambda g: (g,))
    c = float(a)
    return _emit(c - b.data, (b,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        _check_same_shape(a, b, "mul")
        ad, bd = a.data, b.data
        return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))
    if isinstance(a, Tensor):
        c = float(b)
        return _emit(a.data * c, (a,), lambda g: (g * c,))
    c = float(a)
    return _emit(c * b.data, (b,), lambda g: (g * c,))


def div(a, b) -> Tensor:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        _check_same_shape(a, b, "div")
        ad, bd = a.data, b.data
        out = ad / bd
        return _emit(out, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))
    if isinstance(a, Tensor):
        c = float(b)
        return _emit(a.data / c, (a,), lambda g: (g / c,))
    c = float(a)
    bd = b.data
    return _emit(c / bd, (b,), lambda g: (-g * c / (bd * bd),))


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2-D operands or 3-D operands with equal batch size."""
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        out = ad @ bd

        def backward(g):
            ga = g @ bd.T if a.requires_grad else None
            gb = ad.T @ g if b.requires_grad else None
            return ga, gb

        return _emit(out, (a, b), backward)
    if ad.ndim == 3 and bd.ndim == 3:
        if ad.shape[0] != bd.shape[0]:
            raise ValueError(f"matmul: batch sizes {ad.shape[0]} and {bd.shape[0]} differ")
        out = ad @ bd

        def backward(g):
            ga = g @ bd.transpose(0, 2, 1) if a.requires_grad else None
            gb = ad.transpose(0, 2, 1) @ g if b.requires_grad else None
            return ga, gb

        return _emit(out, (a, b), backward)
    raise ValueError(f"matmul: unsupported ranks {ad.ndim} and {bd.ndim}")


# ---------------------------------------------------------------------------
# Elementwise nonlinearities


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _emit(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _emit(out, (a,), lambda g: (g / (2.0 * out),))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _emit(ad * ad, (a,), lambda g: (g * (2.0 * ad),))


def erf(a: Tensor) -> Tensor:
    ad = a.data
    out = _sp.erf(ad)
    return _emit(out, (a,), lambda g: (g * (_TWO_INV_SQRTPI * np.exp(-(ad * ad))),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), computed stably; derivative is the logistic function."""
    ad = a.data
    out = np.logaddexp(np.zeros((), dtype=ad.dtype), ad)
    return _emit(out, (a,), lambda g: (g * _sp.expit(ad),))


def gelu(a: Tensor) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF."""
    ad = a.data
    phi_cdf = 0.5 * (1.0 + _sp.erf(ad * _INV_SQRT2))
    out = ad * phi_cdf

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * ad * ad)
        return (g * (phi_cdf + ad * pdf),)

    return _emit(out, (a,), backward)


def clamp(a: Tensor, lo=None, hi=None) -> Tensor:
    """Clip to [lo, hi]; gradient passes where the input lies inside the range."""
    if lo is None and hi is None:
        raise ValueError("clamp: need at least one bound")
    ad = a.data
    out = np.clip(ad, lo, hi)
    mask = np.ones_like(ad)
    if lo is not None:
        mask = mask * (ad >= lo)
    if hi is not None:
        mask = mask * (ad <= hi)
    return _emit(out, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Fused ops with analytic backwards


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ad = a.data
    shifted = ad - ad.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _emit(out, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift.

    ``gain`` and ``bias`` have shape ``(d,)`` where ``d`` is the size of the
    last axis of ``x``.
    """
    xd = x.data
    d = xd.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ValueError(
            f"layer_norm: gain/bias must have shape ({d},), "
            f"got {gain.data.shape} and {bias.data.shape}"
        )
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = (xd - mu) * inv
    out = xh * gain.data + bias.data

    def backward(g):
        lead = tuple(range(xd.ndim - 1))
        ggain = (g * xh).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gxh = g * gain.data
            m1 = gxh.mean(axis=-1, keepdims=True)
            m2 = (gxh * xh).mean(axis=-1, keepdims=True)
            gx = (gxh - m1 - xh * m2) * inv
        return gx, ggain, gbias

    return _emit(out, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# Reductions and shape ops


def _normalize_axes(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ad = a.data
    axes = _normalize_axes(axis, ad.ndim)
    out = ad.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        gg = g
        if not keepdims:
            shape = list(ad.shape)
            for ax in axes:
                shape[ax] = 1
            gg = g.reshape(shape)
        return (np.broadcast_to(gg, ad.shape).copy(),)

    return _emit(out, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ad = a.data
    axes = _normalize_axes(axis, ad.ndim)
    count = 1
    for ax in axes:
        count *= ad.shape[ax]
    out = ad.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        gg = g
        if not keepdims:
            shape = list(ad.shape)
            for ax in axes:
                shape[ax] = 1
            gg = g.reshape(shape)
        return (np.broadcast_to(gg / count, ad.shape).copy(),)

    return _emit(out, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    in_shape = a.data.shape
    out = a.data.reshape(shape)
    return _emit(out, (a,), lambda g: (g.reshape(in_shape),))


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return _emit(out, (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast.

    The source shape, right-aligned against ``shape``, must match in every
    axis or be 1 there.  The backward pass sums over the expanded axes.
    """
    shape = tuple(shape)
    in_shape = a.data.shape
    if len(in_shape) > len(shape):
        raise ValueError(f"broadcast_to: cannot shrink rank {in_shape} -> {shape}")
    padded = (1,) * (len(shape) - len(in_shape)) + in_shape
    for s_in, s_out in zip(padded, shape):
        if s_in != s_out and s_in != 1:
            raise ValueError(f"broadcast_to: {in_shape} does not broadcast to {shape}")
    out = np.broadcast_to(a.data, shape)
    reduce_axes = tuple(i for i, (s_in, s_out) in enumerate(zip(padded, shape)) if s_in != s_out)

    def backward(g):
        gg = g.sum(axis=reduce_axes, keepdims=True) if reduce_axes else g
        return (gg.reshape(in_shape),)

    return _emit(np.ascontiguousarray(out), (a,), backward)


# ---------------------------------------------------------------------------
# Finite-difference checking


def gradcheck(fn, inputs, h: float = 1e-6) -> float:
    """Compare tape gradients of ``fn`` against central finite differences.

    ``fn`` takes the given tensors and returns a scalar Tensor; it must be
    deterministic.  Everything runs in float64 copies of ``inputs``.  Returns
    the worst relative error over all input elements, where the error of an
    element is ``|analytic - numeric|`` divided by the larger of the two
    gradients' max magnitudes (floored at 1e-4 so all-zero gradients do not
    divide by noise).
    """
    inputs64 = [Tensor(np.array(t.data, dtype=np.float64), requires_grad=True) for t in inputs]
    with Tape() as tape:
        out = fn(*inputs64)
        if out.data.shape != ():
            raise ValueError("gradcheck: fn must return a scalar")
        tape.backward(out)
    worst = 0.0
    for t in inputs64:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            x0 = flat[i]
            step = h * max(1.0, abs(x0))
            flat[i] = x0 + step
            fp = float(fn(*inputs64).data)
            flat[i] = x0 - step
            fm = float(fn(*inputs64).data)
            flat[i] = x0
            num_flat[i] = (fp - fm) / (2.0 * step)
        scale = max(float(np.abs(analytic).max(initial=0.0)),
                    float(np.abs(numeric).max(initial=0.0)), 1e-4)
        rel = float(np.abs(analytic - numeric).max(initial=0.0)) / scale
        worst = max(worst, rel)
    return worst
