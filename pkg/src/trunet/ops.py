"""Differentiable primitives.

Broadcasting is deliberately narrow: binary elementwise operands must have
equal shapes, or one operand must be a python scalar / 0-d tensor, or one
operand's shape must be a trailing suffix of the other's (e.g. a ``(C,)``
bias over a ``(N, H, W, C)`` field).  Anything else raises
:class:`~trunet.errors.ShapeError`.

Spatial operators work on channels-last layouts ``(..., H, W, C)``; every
leading axis is treated as a batch axis.
"""

from __future__ import annotations

import builtins
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import expit

from .errors import ConfigError, ShapeError
from .tensor import Tensor, accumulate, accumulate_at, make_node

def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _check_broadcast(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(b) == 0 or (len(b) <= len(a) and a[len(a) - len(b):] == b):
        return a
    if len(a) == 0 or (len(a) <= len(b) and b[len(b) - len(a):] == a):
        return b
    raise ShapeError(f"shapes {a} and {b} are not broadcast-compatible "
                     "(only equal shapes, scalars, or trailing-suffix shapes are allowed)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    return g.reshape((-1,) + shape).sum(axis=0)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast(a.shape, b.shape)

    def _bw(g):
        accumulate(a, _unbroadcast(g, a.shape))
        accumulate(b, _unbroadcast(g, b.shape))

    return make_node(a.data + b.data, (a, b), _bw)


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast(a.shape, b.shape)

    def _bw(g):
        accumulate(a, _unbroadcast(g, a.shape))
        accumulate(b, -_unbroadcast(g, b.shape))

    return make_node(a.data - b.data, (a, b), _bw)


def mul(a, b) -> Tensor:
    """Hadamard product."""
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast(a.shape, b.shape)

    def _bw(g):
        if a.requires_grad:
            accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            accumulate(b, _unbroadcast(g * a.data, b.shape))

    return make_node(a.data * b.data, (a, b), _bw)


hadamard = mul


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_node(x.data * c, (x,), lambda g: accumulate(x, g * c))


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return make_node(s, (x,), lambda g: accumulate(x, g * s * (1.0 - s)))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return make_node(t, (x,), lambda g: accumulate(x, g * (1.0 - t * t)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0.0).astype(x.dtype, copy=False), (x,),
                     lambda g: accumulate(x, g * mask))


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), evaluated without overflow."""
    out = np.logaddexp(x.data.dtype.type(0), x.data)
    return make_node(out, (x,), lambda g: accumulate(x, g * expit(x.data)))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return make_node(e, (x,), lambda g: accumulate(x, g * e))


def log(x: Tensor) -> Tensor:
    return make_node(np.log(x.data), (x,), lambda g: accumulate(x, g / x.data))


def square(x: Tensor) -> Tensor:
    return make_node(x.data * x.data, (x,), lambda g: accumulate(x, 2.0 * g * x.data))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the adjoint is zero where clamping was active."""
    inside = (x.data >= lo) & (x.data <= hi)
    return make_node(np.clip(x.data, lo, hi), (x,), lambda g: accumulate(x, g * inside))


_ELEMENTWISE = {
    "sigmoid": sigmoid, "tanh": tanh, "relu": relu, "softplus": softplus,
    "hadamard": mul, "add": add, "sub": sub,
}


def elementwise(op: str, *operands) -> Tensor:
    """Dispatch one of the named pointwise operations."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ConfigError(f"unknown elementwise op {op!r}") from None
    return fn(*operands)


# ----------------------------------------------------------------- reductions

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        accumulate(x, np.broadcast_to(g, x.shape).astype(x.dtype, copy=True))

    return make_node(np.asarray(out, dtype=x.dtype), (x,), _bw)


def ordered_sum(x: Tensor, axis: int) -> Tensor:
    """Sum along one axis after sorting it, so the result ignores input order."""
    out = np.sum(np.sort(x.data, axis=axis), axis=axis)

    def _bw(g):
        accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.shape).astype(x.dtype, copy=True))

    return make_node(np.asarray(out, dtype=x.dtype), (x,), _bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ----------------------------------------------------------- linear algebra

def _shared_rhs_grad(a2: np.ndarray, g2: np.ndarray) -> np.ndarray:
    """Adjoint of a (k, n) matrix shared across all rows of a flattened (rows, k) operand."""
    return a2.T @ g2


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    ``a`` is ``(..., m, k)``; ``b`` is either a plain ``(k, n)`` matrix shared
    across the batch axes of ``a`` or ``(..., k, n)`` with identical batch axes.
    """
    a = _lift(a)
    b = _lift(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner extents disagree: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"batch extents disagree: {a.shape} @ {b.shape}")
    shared_rhs = b.ndim == 2 and a.ndim > 2

    def _bw(g):
        if a.requires_grad:
            accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if shared_rhs:
                k, n = b.shape
                accumulate(b, _shared_rhs_grad(a.data.reshape(-1, k), g.reshape(-1, n)))
            else:
                accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return make_node(a.data @ b.data, (a, b), _bw)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_node(np.transpose(x.data, axes), (x,),
                     lambda g: accumulate(x, np.transpose(g, inverse)))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    # sorted denominator keeps the weights equivariant under reordering
    s = e / np.sort(e, axis=-1).sum(axis=-1, keepdims=True)

    def _bw(g):
        accumulate(x, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return make_node(s, (x,), _bw)


# -------------------------------------------------------------- data movement

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(n) for n in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}") from None
    return make_node(out, (x,), lambda g: accumulate(x, g.reshape(x.shape)))


def getitem(x: Tensor, index) -> Tensor:
    """Basic (int/slice) indexing; the adjoint scatters into a zero buffer."""
    out = x.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out, dtype=x.dtype)
    return make_node(out, (x,), lambda g: accumulate_at(x, index, g))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one operand")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat operands disagree off axis {axis}: {ref} vs {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def _bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [builtins.slice(None)] * g.ndim
                idx[ax] = builtins.slice(int(lo), int(hi))
                accumulate(t, g[tuple(idx)])

    return make_node(np.concatenate([t.data for t in tensors], axis=ax), tensors, _bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("stack needs at least one operand")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != ref:
            raise ShapeError(f"stack operands disagree: {ref} vs {t.shape}")
    ax = axis % (len(ref) + 1)

    def _bw(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                accumulate(t, np.take(g, i, axis=ax))

    return make_node(np.stack([t.data for t in tensors], axis=ax), tensors, _bw)


def repeat(x: Tensor, factor: int, axis: int = 0) -> Tensor:
    """Repeat every element ``factor`` times along ``axis`` ([a, b] -> [a, a, b, b])."""
    if factor < 1:
        raise ShapeError(f"repeat factor must be >= 1, got {factor}")
    ax = axis % x.ndim

    def _bw(g):
        shape = x.shape[:ax] + (x.shape[ax], factor) + x.shape[ax + 1:]
        accumulate(x, g.reshape(shape).sum(axis=ax + 1))

    return make_node(np.repeat(x.data, factor, axis=ax), (x,), _bw)


# ------------------------------------------------------------------- spatial

def same_padding(k: int) -> tuple[int, int]:
    """Zero padding (before, after) that keeps an extent fixed for kernel size k.

    Even kernels pad one more cell after than before.
    """
    before = (k - 1) // 2
    return before, k - 1 - before


def _conv_raw(x4: np.ndarray, kernel: np.ndarray, pads: tuple) -> tuple[np.ndarray, np.ndarray]:
    """Cross-correlate (B, H, W, Cin) with (Cout, Kh, Kw, Cin); returns (out, cols)."""
    b, h, w, cin = x4.shape
    cout, kh, kw, _ = kernel.shape
    pt, pb, pl, pr = pads
    if kh == 1 and kw == 1:
        cols = x4.reshape(b * h * w, cin)
    else:
        xp = np.zeros((b, h + pt + pb, w + pl + pr, cin), dtype=x4.dtype)
        xp[:, pt:pt + h, pl:pl + w] = x4
        s0, s1, s2, s3 = xp.strides
        win = as_strided(xp, (b, h, w, kh, kw, cin), (s0, s1, s2, s1, s2, s3), writeable=False)
        cols = win.reshape(b * h * w, kh * kw * cin)
    out = cols @ kernel.reshape(cout, -1).T
    return out.reshape(b, h, w, cout), cols


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """2-D convolution (cross-correlation) with "same" zero padding.

    ``x`` is ``(..., H, W, Cin)``, ``kernel`` is ``(Cout, Kh, Kw, Cin)`` and
    ``bias`` is ``(Cout,)``.  The output is ``(..., H, W, Cout)``.
    """
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be (Cout, Kh, Kw, Cin), got {kernel.shape}")
    if x.ndim < 3:
        raise ShapeError(f"input must be (..., H, W, Cin), got {x.shape}")
    cout, kh, kw, cin = kernel.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"kernel expects {cin} input channels, input has {x.shape[-1]}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias must be ({cout},), got {bias.shape}")
    lead = x.shape[:-3]
    h, w = x.shape[-3], x.shape[-2]
    pt, pb = same_padding(kh)
    pl, pr = same_padding(kw)
    x4 = x.data.reshape((-1, h, w, cin))
    out, cols = _conv_raw(x4, kernel.data, (pt, pb, pl, pr))
    if bias is not None:
        out += bias.data

    def _bw(g):
        g4 = g.reshape((-1, h, w, cout))
        if kernel.requires_grad:
            gk = (cols.T @ g4.reshape(-1, cout)).T.reshape(kernel.shape)
            accumulate(kernel, gk)
        if bias is not None and bias.requires_grad:
            accumulate(bias, g4.sum(axis=(0, 1, 2)))
        if x.requires_grad:
            flipped = np.ascontiguousarray(kernel.data[:, ::-1, ::-1, :].transpose(3, 1, 2, 0))
            gx, _ = _conv_raw(g4, flipped, (pb, pt, pr, pl))
            accumulate(x, gx.reshape(x.shape))

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_node(out.reshape(lead + (h, w, cout)), parents, _bw)


def avg_pool3d(x: Tensor, m: int) -> Tensor:
    """Average over non-overlapping m x m spatial blocks of (..., H, W, C).

    Leading (time/batch) axes and channels are untouched, i.e. an
    ``m x m x 1`` pool.
    """
    if x.ndim < 3:
        raise ShapeError(f"input must be (..., H, W, C), got {x.shape}")
    h, w, c = x.shape[-3:]
    if m < 1 or h % m or w % m:
        raise ConfigError(f"spatial extents {(h, w)} are not divisible by pool size {m}")
    lead = x.shape[:-3]
    blocks = x.data.reshape(lead + (h // m, m, w // m, m, c))
    out = blocks.mean(axis=(-4, -2))
    inv = 1.0 / (m * m)

    def _bw(g):
        gb = np.broadcast_to(np.expand_dims(g, (-4, -2)) * inv, blocks.shape)
        accumulate(x, gb.reshape(x.shape))

    return make_node(out, (x,), _bw)


def interp_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Align-corners linear interpolation taps along one axis.

    Returns ``(lo, hi, frac)`` such that output ``i`` equals
    ``(1 - frac[i]) * src[lo[i]] + frac[i] * src[hi[i]]``.
    """
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(np.int64), builtins.max(n_in - 2, 0))
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def bilinear_resample(x: np.ndarray, target: tuple[int, int],
                      rows: np.ndarray | None = None,
                      cols: np.ndarray | None = None) -> np.ndarray:
    """Align-corners bilinear resampling of (..., H, W, C) to ``target``.

    ``rows``/``cols`` optionally select a subset of output rows/columns; the
    selected values are bit-identical to the same entries of the full result.
    """
    h, w = x.shape[-3], x.shape[-2]
    ty, tx = target
    lo_y, hi_y, fy = interp_weights(h, ty)
    lo_x, hi_x, fx = interp_weights(w, tx)
    if rows is not None:
        lo_y, hi_y, fy = lo_y[rows], hi_y[rows], fy[rows]
    if cols is not None:
        lo_x, hi_x, fx = lo_x[cols], hi_x[cols], fx[cols]
    dt = x.dtype
    fy = fy.astype(dt)[:, None, None]
    fx = fx.astype(dt)[:, None]
    tmp = (1 - fy) * x[..., lo_y, :, :] + fy * x[..., hi_y, :, :]
    return (1 - fx) * tmp[..., lo_x, :] + fx * tmp[..., hi_x, :]


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    lo, hi, frac = interp_weights(n_in, n_out)
    mat = np.zeros((n_out, n_in))
    np.add.at(mat, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(mat, (np.arange(n_out), hi), frac)
    return mat


def bilinear_upsample(x: Tensor, target: tuple[int, int]) -> Tensor:
    """Differentiable align-corners bilinear upsampling of (..., H, W, C)."""
    if x.ndim < 3:
        raise ShapeError(f"input must be (..., H, W, C), got {x.shape}")
    h, w = x.shape[-3], x.shape[-2]
    ty, tx = int(target[0]), int(target[1])
    if ty < h or tx < w:
        raise ShapeError(f"target {(ty, tx)} is smaller than source {(h, w)}")
    out = bilinear_resample(x.data, (ty, tx))

    def _bw(g):
        ry = _interp_matrix(h, ty).astype(x.dtype)
        rx = _interp_matrix(w, tx).astype(x.dtype)
        gx = np.einsum("yh,...yxc,xw->...hwc", ry, g, rx)
        accumulate(x, gx)

    return make_node(out, (x,), _bw)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast; the adjoint sums over expanded axes."""
    shape = tuple(int(n) for n in shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}") from None
    lead = len(shape) - x.ndim
    expanded = tuple(i for i in range(len(shape))
                     if i < lead or (x.shape[i - lead] == 1 and shape[i] != 1))

    def _bw(g):
        gx = g.sum(axis=expanded, keepdims=True) if expanded else g
        accumulate(x, gx.reshape(gx.shape[lead:]) if lead else gx)

    return make_node(np.ascontiguousarray(out), (x,), _bw)
