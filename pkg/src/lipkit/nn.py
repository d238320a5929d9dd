"""Feed-forward layers with analytic backward passes.

Convolutions are cross-correlations implemented as strided window views
contracted against the kernel. Layouts are channels-first:
``(B, C, H, W)`` for 2D and ``(B, C, T, H, W)`` for 3D.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autograd import Variable, make_op
from .ndtensor import FLOAT32, Rng, ShapeError, rand_uniform

# contraction chunks are capped at this many window elements (~64 MB in f32)
_CHUNK_ELEMS = 1 << 24


class Param(Variable):
    """Trainable tensor with a gradient slot of the same shape."""

    __slots__ = ("has_grad",)

    def __init__(self, value: np.ndarray, name: str):
        super().__init__(np.asarray(value), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)
        self.has_grad = False

    @property
    def value(self) -> np.ndarray:
        return self.data

    def accumulate(self, g: np.ndarray) -> None:
        self.grad += g
        self.has_grad = True

    def zero_grad(self) -> None:
        self.grad.fill(0)
        self.has_grad = False


def zero_grad(params) -> None:
    for p in params:
        p.zero_grad()


def glorot_bound(d_in: int, d_out: int) -> float:
    if d_in < 1 or d_out < 1:
        raise ValueError(f"fan counts must be >= 1, got d_in={d_in}, d_out={d_out}")
    return math.sqrt(2.0 / (d_in + d_out))


def init_dense_uniform(rng: Rng, d_in: int, d_out: int, shape, dtype=FLOAT32) -> np.ndarray:
    """Uniform on [-a, a] with a = sqrt(2 / (d_in + d_out))."""
    a = glorot_bound(d_in, d_out)
    return rand_uniform(rng, shape, -a, a, dtype=dtype)


def conv_fans(w_shape) -> tuple[int, int]:
    """(fan_in, fan_out) of a conv kernel ``(C_out, C_in, *kernel)``."""
    vol = int(np.prod(w_shape[2:]))
    return w_shape[1] * vol, w_shape[0] * vol


# ---------------------------------------------------------------- convolution

def _tuple(v, n: int) -> tuple[int, ...]:
    if isinstance(v, int):
        return (v,) * n
    v = tuple(int(a) for a in v)
    if len(v) != n:
        raise ShapeError(f"expected {n} values, got {v}")
    return v


def conv_output_extent(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _convnd(x: Variable, w: Variable, b: Variable | None, stride, pad, n: int) -> Variable:
    if x.data.ndim != n + 2 or w.data.ndim != n + 2:
        raise ShapeError(f"conv{n}d expects rank-{n + 2} input and kernel, got {x.shape} and {w.shape}")
    B, C = x.shape[:2]
    O, Cw = w.shape[:2]
    if C != Cw:
        raise ShapeError(f"conv{n}d channel mismatch: input {x.shape}, kernel {w.shape}")
    if b is not None and b.shape != (O,):
        raise ShapeError(f"conv{n}d bias shape {b.shape} != ({O},)")
    stride = _tuple(stride, n)
    pad = _tuple(pad, n)
    ksize = w.shape[2:]
    out_sp = tuple(conv_output_extent(s, k, st, p) for s, k, st, p in zip(x.shape[2:], ksize, stride, pad))
    if any(o < 1 for o in out_sp):
        raise ShapeError(f"conv{n}d produces empty output {out_sp} for input {x.shape}")

    sp_axes = tuple(range(2, 2 + n))
    xp = np.pad(x.data, [(0, 0), (0, 0)] + [(p, p) for p in pad]) if any(pad) else x.data
    kvol = int(np.prod(ksize))
    npos = int(np.prod(out_sp))
    w2 = w.data.reshape(O, C * kvol)
    # columns are laid out (C, *k, b, *out) so the copy runs along output rows
    col_order = (1,) + tuple(range(2 + n, 2 + 2 * n)) + (0,) + sp_axes

    def columns(s0: int, s1: int) -> np.ndarray:
        win = sliding_window_view(xp[s0:s1], ksize, axis=sp_axes)
        sel = (slice(None), slice(None)) + tuple(slice(None, o * st, st) for o, st in zip(out_sp, stride))
        cols = np.ascontiguousarray(np.transpose(win[sel], col_order))
        return cols.reshape(C * kvol, (s1 - s0) * npos)

    chunk = max(1, _CHUNK_ELEMS // max(C * kvol * npos, 1))
    spans = [(s, min(s + chunk, B)) for s in range(0, B, chunk)]
    cache = len(spans) == 1 and (x.requires_grad or w.requires_grad)
    cached: list[np.ndarray] = []

    out = np.empty((B, O) + out_sp, dtype=x.dtype)
    for s0, s1 in spans:
        cols = columns(s0, s1)
        if cache:
            cached.append(cols)
        y = (w2 @ cols).reshape((O, s1 - s0) + out_sp)
        out[s0:s1] = np.moveaxis(y, 0, 1)
    if b is not None:
        out += b.data.reshape((1, O) + (1,) * n)

    def backward(g):
        gw = np.zeros_like(w2) if w.requires_grad else None
        gx = np.zeros((C,) + xp.shape[:1] + xp.shape[2:], dtype=g.dtype) if x.requires_grad else None
        for s0, s1 in spans:
            g2 = np.ascontiguousarray(np.moveaxis(g[s0:s1], 1, 0)).reshape(O, (s1 - s0) * npos)
            if gw is not None:
                cols = cached[0] if cache else columns(s0, s1)
                gw += g2 @ cols.T
            if gx is not None:
                dcols = (w2.T @ g2).reshape((C,) + tuple(ksize) + (s1 - s0,) + out_sp)
                dst = gx[:, s0:s1]
                for off in itertools.product(*(range(k) for k in ksize)):
                    sel = (slice(None), slice(None)) + tuple(
                        slice(o0, o0 + o * st, st) for o0, o, st in zip(off, out_sp, stride)
                    )
                    dst[sel] += dcols[(slice(None),) + off]
        if gx is not None:
            crop = (slice(None), slice(None)) + tuple(slice(p, p + sz) for p, sz in zip(pad, x.shape[2:]))
            gx = np.moveaxis(gx[crop], 0, 1)
        g_sum_axes = (0,) + sp_axes
        gb = g.sum(axis=g_sum_axes) if (b is not None and b.requires_grad) else None
        gw = gw.reshape(w.shape) if gw is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return make_op(out, parents, backward)


def conv2d(x: Variable, w: Variable, b: Variable | None = None, stride=1, pad=0) -> Variable:
    return _convnd(x, w, b, stride, pad, 2)


def conv3d(x: Variable, w: Variable, b: Variable | None = None, stride=1, pad=0) -> Variable:
    stride, pad = _tuple(stride, 3), _tuple(pad, 3)
    if stride[0] == 1 and x.data.ndim == 5 and w.data.ndim == 5:
        return _conv3d_time_split(x, w, b, stride, pad)
    return _convnd(x, w, b, stride, pad, 3)


def _conv3d_time_split(x: Variable, w: Variable, b: Variable | None, stride, pad) -> Variable:
    """conv3d with temporal stride 1: one 2D column matrix, one matmul per temporal tap.

    Avoids materialising kt copies of every spatial window.
    """
    B, C, T, H, W = x.shape
    O, Cw, kt, kh, kw = w.shape
    if C != Cw:
        raise ShapeError(f"conv3d channel mismatch: input {x.shape}, kernel {w.shape}")
    if b is not None and b.shape != (O,):
        raise ShapeError(f"conv3d bias shape {b.shape} != ({O},)")
    _, sh, sw = stride
    pt, ph, pw = pad
    To = conv_output_extent(T, kt, 1, pt)
    Ho = conv_output_extent(H, kh, sh, ph)
    Wo = conv_output_extent(W, kw, sw, pw)
    if min(To, Ho, Wo) < 1:
        raise ShapeError(f"conv3d produces empty output for input {x.shape}")
    xp = np.pad(x.data, [(0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)]) if any(pad) else x.data
    Tp = xp.shape[2]
    win = sliding_window_view(xp, (kh, kw), axis=(3, 4))[:, :, :, : Ho * sh : sh, : Wo * sw : sw]
    # (C, kh, kw, Tp, B, Ho, Wo): a temporal tap is a contiguous slice along Tp
    cols = np.ascontiguousarray(np.transpose(win, (1, 5, 6, 2, 0, 3, 4)))
    K2 = C * kh * kw
    N2 = To * B * Ho * Wo

    def tap(dt: int) -> np.ndarray:
        return cols[:, :, :, dt : dt + To].reshape(K2, N2)

    def wtap(dt: int) -> np.ndarray:
        return np.ascontiguousarray(w.data[:, :, dt]).reshape(O, K2)

    y = np.zeros((O, N2), dtype=x.dtype)
    for dt in range(kt):
        y += wtap(dt) @ tap(dt)
    out = np.ascontiguousarray(np.transpose(y.reshape(O, To, B, Ho, Wo), (2, 0, 1, 3, 4)))
    if b is not None:
        out += b.data.reshape(1, O, 1, 1, 1)

    def backward(g):
        g2 = np.ascontiguousarray(np.transpose(g, (1, 2, 0, 3, 4))).reshape(O, N2)
        gw = gx = gb = None
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for dt in range(kt):
                gw[:, :, dt] = (g2 @ tap(dt).T).reshape(O, C, kh, kw)
        if x.requires_grad:
            dcols = np.zeros((C, kh, kw, Tp, B, Ho, Wo), dtype=g.dtype)
            for dt in range(kt):
                dcols[:, :, :, dt : dt + To] += (wtap(dt).T @ g2).reshape(C, kh, kw, To, B, Ho, Wo)
            gxt = np.zeros((C, Tp, B) + xp.shape[3:], dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxt[:, :, :, i : i + Ho * sh : sh, j : j + Wo * sw : sw] += dcols[:, i, j]
            gx = np.transpose(gxt, (2, 0, 1, 3, 4))[:, :, pt : pt + T, ph : ph + H, pw : pw + W]
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return make_op(out, parents, backward)


def maxpool2d(x: Variable, k: int = 3, stride: int = 2, pad: int = 1) -> Variable:
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d expects (N, C, H, W), got {x.shape}")
    N, C, H, W = x.shape
    Ho = conv_output_extent(H, k, stride, pad)
    Wo = conv_output_extent(W, k, stride, pad)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"maxpool2d produces empty output for input {x.shape}")
    xp = np.pad(x.data, [(0, 0), (0, 0), (pad, pad), (pad, pad)], constant_values=-np.inf)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : Ho * stride : stride, : Wo * stride : stride]
    flat = win.reshape(N, C, Ho, Wo, k * k)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gx[:, :, i : i + Ho * stride : stride, j : j + Wo * stride : stride] += g * (idx == i * k + j)
        return (gx[:, :, pad : pad + H, pad : pad + W],)

    return make_op(np.ascontiguousarray(out), (x,), backward)


# ---------------------------------------------------------------- batch norm

@dataclass
class BatchNormState:
    gamma: Param
    beta: Param
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps_bn: float = 1e-5

    @classmethod
    def create(cls, channels: int, name: str, dtype=FLOAT32, momentum: float = 0.1, eps_bn: float = 1e-5):
        return cls(
            gamma=Param(np.ones(channels, dtype=dtype), f"{name}.gamma"),
            beta=Param(np.zeros(channels, dtype=dtype), f"{name}.beta"),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            eps_bn=eps_bn,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batchnorm(x: Variable, state: BatchNormState, mode: str = "train") -> Variable:
    """Per-channel normalization over every axis except axis 1."""
    if x.data.ndim < 2 or x.shape[1] != state.channels:
        raise ShapeError(f"batchnorm channel mismatch: input {x.shape}, state has {state.channels} channels")
    axes = (0,) + tuple(range(2, x.data.ndim))
    bshape = (1, -1) + (1,) * (x.data.ndim - 2)
    gamma, beta = state.gamma, state.beta
    m = x.data.size // state.channels

    if mode == "train":
        if m < 2:
            raise ShapeError("batchnorm in train mode needs at least 2 values per channel")
        mu = x.data.mean(axis=axes)
        xc = x.data - mu.reshape(bshape)
        var = np.mean(xc * xc, axis=axes)
        inv = 1.0 / np.sqrt(var + state.eps_bn)
        xhat = xc * inv.reshape(bshape)
        mom = state.momentum
        state.running_mean[...] = (1 - mom) * state.running_mean + mom * mu
        state.running_var[...] = (1 - mom) * state.running_var + mom * var * (m / (m - 1))

        def backward(g):
            gg = g * gamma.data.reshape(bshape)
            gx = None
            if x.requires_grad:
                s1 = gg.sum(axis=axes).reshape(bshape)
                s2 = (gg * xhat).sum(axis=axes).reshape(bshape)
                gx = (inv.reshape(bshape) / m) * (m * gg - s1 - xhat * s2)
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    elif mode == "eval":
        inv = 1.0 / np.sqrt(state.running_var + state.eps_bn)
        xhat = (x.data - state.running_mean.reshape(bshape)) * inv.reshape(bshape)

        def backward(g):
            gx = g * (gamma.data * inv).reshape(bshape) if x.requires_grad else None
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    else:
        raise ValueError(f"unknown mode {mode!r}")

    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    return make_op(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


# ---------------------------------------------------------------- misc layers

def activation(x: Variable, kind: str) -> Variable:
    from . import autograd as ag

    if kind == "relu":
        return ag.relu(x)
    if kind == "sigmoid":
        return ag.sigmoid(x)
    if kind == "tanh":
        return ag.tanh(x)
    raise ValueError(f"unknown activation {kind!r}")


def dropout(x: Variable, p: float, rng: Rng | None, mode: str = "train") -> Variable:
    """Inverted dropout; identity in eval mode or when p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)

    def backward(g):
        return (g * keep,)

    return make_op(x.data * keep, (x,), backward)


def linear(x: Variable, w: Variable, b: Variable | None = None) -> Variable:
    """y = x @ w.T + b for ``x`` of shape (B, d_in) and ``w`` of shape (d_out, d_in)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear shape mismatch: x {x.shape}, w {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear bias shape {b.shape} != ({w.shape[0]},)")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def backward(g):
        gx = g @ w.data if x.requires_grad else None
        gw = g.T @ x.data if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if b.requires_grad else None)

    parents = (x, w) if b is None else (x, w, b)
    return make_op(out, parents, backward)


def global_avgpool(x: Variable) -> Variable:
    """Mean over every axis after the channel axis: (B, C, ...) -> (B, C)."""
    if x.data.ndim < 3:
        raise ShapeError(f"global_avgpool expects spatial axes, got {x.shape}")
    axes = tuple(range(2, x.data.ndim))
    count = int(np.prod(x.shape[2:]))

    def backward(g):
        return (np.broadcast_to(g.reshape(g.shape + (1,) * len(axes)), x.shape) / x.dtype.type(count),)

    return make_op(x.data.mean(axis=axes), (x,), backward)

