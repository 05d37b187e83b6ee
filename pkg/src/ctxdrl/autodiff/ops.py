"""Differentiable primitives.

Every primitive accepts :class:`Tensor` objects or plain arrays/scalars
(treated as constants) and returns a :class:`Tensor`. When any operand lives
on a tape the application is recorded there; otherwise it is evaluated
eagerly with no bookkeeping.

Convolutions use "valid" padding, dilation 1, and channel-first layouts:
``conv1d`` takes ``[B, C, L]`` and ``conv2d`` takes ``[B, C, H, W]``.
"""

from __future__ import annotations

import builtins

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .tape import Tensor


def _run(fwd, *inputs) -> Tensor:
    for x in inputs:
        if isinstance(x, Tensor) and x.tape is not None:
            return x.tape.apply(fwd, *inputs)
    arrays = [x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64) for x in inputs]
    out, _ = fwd(*arrays)
    return Tensor(out)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a, b) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------------------
# elementwise arithmetic
# ----------------------------------------------------------------------------

def _add(a, b):
    _broadcast_shape(a, b)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _sub(a, b):
    _broadcast_shape(a, b)
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


def _mul(a, b):
    _broadcast_shape(a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


def _div(a, b):
    _broadcast_shape(a, b)
    out = a / b
    return out, lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape))


def _neg(a):
    return -a, lambda g: (-g,)


def add(a, b) -> Tensor:
    return _run(_add, a, b)


def sub(a, b) -> Tensor:
    return _run(_sub, a, b)


def mul(a, b) -> Tensor:
    return _run(_mul, a, b)


def div(a, b) -> Tensor:
    return _run(_div, a, b)


def neg(a) -> Tensor:
    return _run(_neg, a)


def _abs(a):
    return np.abs(a), lambda g: (g * np.sign(a),)


def abs(a) -> Tensor:
    """Elementwise absolute value; the subgradient at 0 is 0."""
    return _run(_abs, a)


def _relu(a):
    mask = a > 0
    return np.where(mask, a, 0.0), lambda g: (g * mask,)


def relu(a) -> Tensor:
    return _run(_relu, a)


def _sigmoid_arr(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ----------------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------------

def _matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return a @ b, vjp


def matmul(a, b) -> Tensor:
    return _run(_matmul, a, b)


def conv1d(x, kernel, bias=None, stride: int = 1) -> Tensor:
    """``x`` [B, C, L], ``kernel`` [F, C, K], ``bias`` [F] -> [B, F, (L-K)//stride + 1]."""
    if stride < 1:
        raise ShapeError("stride must be >= 1")

    def fwd(x, k, b=None):
        if x.ndim != 3 or k.ndim != 3 or x.shape[1] != k.shape[1]:
            raise ShapeError(f"conv1d shape mismatch {x.shape} * {k.shape}")
        K = k.shape[2]
        if x.shape[2] < K:
            raise ShapeError(f"conv1d kernel {K} longer than input {x.shape[2]}")
        win = sliding_window_view(x, K, axis=2)[:, :, ::stride, :]  # [B, C, Lo, K]
        Lo = win.shape[2]
        out = np.einsum("bclk,fck->bfl", win, k)
        if b is not None:
            out = out + b[None, :, None]

        def vjp(g):
            gk = np.einsum("bfl,bclk->fck", g, win)
            gx = np.zeros_like(x)
            for j in range(K):
                gx[:, :, j:j + stride * (Lo - 1) + 1:stride] += np.einsum("bfl,fc->bcl", g, k[:, :, j])
            gb = g.sum(axis=(0, 2)) if b is not None else None
            return (gx, gk) if b is None else (gx, gk, gb)

        return out, vjp

    if bias is None:
        return _run(fwd, x, kernel)
    return _run(fwd, x, kernel, bias)


def conv2d(x, kernel, bias=None, stride=(1, 1)) -> Tensor:
    """``x`` [B, C, H, W], ``kernel`` [F, C, KH, KW], ``bias`` [F] -> [B, F, Ho, Wo]."""
    sh, sw = (stride, stride) if isinstance(stride, int) else tuple(stride)
    if sh < 1 or sw < 1:
        raise ShapeError("stride must be >= 1")

    def fwd(x, k, b=None):
        if x.ndim != 4 or k.ndim != 4 or x.shape[1] != k.shape[1]:
            raise ShapeError(f"conv2d shape mismatch {x.shape} * {k.shape}")
        KH, KW = k.shape[2:]
        if x.shape[2] < KH or x.shape[3] < KW:
            raise ShapeError(f"conv2d kernel {(KH, KW)} larger than input {x.shape[2:]}")
        win = sliding_window_view(x, (KH, KW), axis=(2, 3))[:, :, ::sh, ::sw]  # [B,C,Ho,Wo,KH,KW]
        Ho, Wo = win.shape[2:4]
        out = np.einsum("bchwij,fcij->bfhw", win, k)
        if b is not None:
            out = out + b[None, :, None, None]

        def vjp(g):
            gk = np.einsum("bfhw,bchwij->fcij", g, win)
            gx = np.zeros_like(x)
            for i in range(KH):
                for j in range(KW):
                    gx[:, :, i:i + sh * (Ho - 1) + 1:sh, j:j + sw * (Wo - 1) + 1:sw] += np.einsum(
                        "bfhw,fc->bchw", g, k[:, :, i, j])
            gb = g.sum(axis=(0, 2, 3)) if b is not None else None
            return (gx, gk) if b is None else (gx, gk, gb)

        return out, vjp

    if bias is None:
        return _run(fwd, x, kernel)
    return _run(fwd, x, kernel, bias)


def _lstm_cell(x, hc, w, b):
    H = hc.shape[-1] // 2
    if hc.shape[-1] != 2 * H or w.shape != (x.shape[-1] + H, 4 * H) or b.shape != (4 * H,):
        raise ShapeError(f"lstm_cell shape mismatch x{x.shape} hc{hc.shape} w{w.shape} b{b.shape}")
    h, c = hc[..., :H], hc[..., H:]
    z = np.concatenate([x, h], axis=-1)
    pre = z @ w + b
    i = _sigmoid_arr(pre[..., :H])
    f = _sigmoid_arr(pre[..., H:2 * H])
    gg = np.tanh(pre[..., 2 * H:3 * H])
    o = _sigmoid_arr(pre[..., 3 * H:])
    c_new = f * c + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc

    def vjp(g):
        gh, gc = g[..., :H], g[..., H:]
        go = gh * tc
        gc_total = gc + gh * o * (1.0 - tc * tc)
        gi = gc_total * gg
        gf = gc_total * c
        ggg = gc_total * i
        gc_prev = gc_total * f
        gpre = np.concatenate([
            gi * i * (1.0 - i),
            gf * f * (1.0 - f),
            ggg * (1.0 - gg * gg),
            go * o * (1.0 - o),
        ], axis=-1)
        gz = gpre @ w.T
        gw = np.swapaxes(z.reshape(-1, z.shape[-1]), 0, 1) @ gpre.reshape(-1, 4 * H)
        gb = gpre.reshape(-1, 4 * H).sum(axis=0)
        gx = gz[..., :x.shape[-1]]
        ghc = np.concatenate([gz[..., x.shape[-1]:], gc_prev], axis=-1)
        return gx, ghc, gw, gb

    return np.concatenate([h_new, c_new], axis=-1), vjp


def lstm_cell(x, hc, w, b) -> Tensor:
    """One LSTM step.

    ``hc`` packs hidden and cell state as ``[..., 2H]`` (hidden first); the
    result uses the same packing. ``w`` is ``[in + H, 4H]`` acting on
    ``concat(x, h)`` with gate blocks ordered input, forget, candidate, output.
    """
    return _run(_lstm_cell, x, hc, w, b)


# ----------------------------------------------------------------------------
# normalisation / reductions
# ----------------------------------------------------------------------------

def _softmax(a):
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ShapeError("softmax needs a non-empty last axis")
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)
    return s, lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),)


def softmax(a) -> Tensor:
    """Softmax over the last axis (max-shifted)."""
    return _run(_softmax, a)


def _axes(ndim, axis):
    if axis is None:
        return tuple(range(ndim))
    axis = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(ax % ndim for ax in axis)


def _count(shape, axes):
    n = 1
    for ax in axes:
        n *= shape[ax]
    return n


def _expand(g, shape, axes):
    for ax in sorted(axes):
        g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum(a, axis=None) -> Tensor:
    def fwd(x):
        axes = _axes(x.ndim, axis)
        return x.sum(axis=axes), lambda g: (np.array(_expand(g, x.shape, axes)),)
    return _run(fwd, a)


def mean(a, axis=None) -> Tensor:
    def fwd(x):
        axes = _axes(x.ndim, axis)
        n = _count(x.shape, axes)
        if n == 0:
            raise ShapeError("mean over an empty axis")
        return x.mean(axis=axes), lambda g: (np.array(_expand(g, x.shape, axes)) / n,)
    return _run(fwd, a)


def std(a, axis=None, eps: float = 1e-14) -> Tensor:
    """Sample standard deviation ``sqrt(var_{n-1} + eps)``."""
    def fwd(x):
        axes = _axes(x.ndim, axis)
        n = _count(x.shape, axes)
        if n < 2:
            raise ShapeError("std needs at least two observations")
        mu = x.mean(axis=axes, keepdims=True)
        d = x - mu
        s = np.sqrt((d * d).sum(axis=axes) / (n - 1) + eps)

        def vjp(g):
            return (_expand(g / s, x.shape, axes) * d / (n - 1),)

        return s, vjp
    return _run(fwd, a)


def prod(a, axis: int = -1) -> Tensor:
    """Product along one axis; the gradient uses prefix/suffix products (no division)."""
    def fwd(x):
        if x.ndim == 0 or x.shape[axis] == 0:
            raise ShapeError("prod over an empty axis")
        xm = np.moveaxis(x, axis, -1)
        out = np.prod(xm, axis=-1)

        def vjp(g):
            ones = np.ones(xm.shape[:-1] + (1,))
            pre = np.concatenate([ones, np.cumprod(xm[..., :-1], axis=-1)], axis=-1)
            suf = np.concatenate([np.cumprod(xm[..., :0:-1], axis=-1)[..., ::-1], ones], axis=-1)
            return (np.moveaxis(g[..., None] * pre * suf, -1, axis),)

        return out, vjp
    return _run(fwd, a)


# ----------------------------------------------------------------------------
# structural
# ----------------------------------------------------------------------------

def slice(a, key) -> Tensor:
    def fwd(x):
        out = np.array(x[key])

        def vjp(g):
            gx = np.zeros_like(x)
            if _fancy(key):
                np.add.at(gx, key, g)
            else:
                gx[key] = g
            return (gx,)

        return out, vjp
    return _run(fwd, a)


def _fancy(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return builtins.any(isinstance(k, (list, np.ndarray)) for k in keys)


def reshape(a, shape) -> Tensor:
    shape = tuple(shape)

    def fwd(x):
        try:
            out = x.reshape(shape)
        except ValueError:
            raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None
        return out, lambda g: (g.reshape(x.shape),)
    return _run(fwd, a)


def concat(items, axis: int = -1) -> Tensor:
    items = list(items)
    if not items:
        raise ShapeError("concat of nothing")

    def fwd(*xs):
        try:
            out = np.concatenate(xs, axis=axis)
        except ValueError as exc:
            raise ShapeError(f"concat shape mismatch: {exc}") from None
        bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

        def vjp(g):
            return tuple(np.split(g, bounds, axis=axis))

        return out, vjp
    return _run(fwd, *items)


def stack(items, axis: int = 0) -> Tensor:
    items = list(items)
    if not items:
        raise ShapeError("stack of nothing")

    def fwd(*xs):
        try:
            out = np.stack(xs, axis=axis)
        except ValueError as exc:
            raise ShapeError(f"stack shape mismatch: {exc}") from None
        return out, lambda g: tuple(np.moveaxis(g, axis, 0))
    return _run(fwd, *items)
