"""Differentiable primitives.

Every op takes and returns :class:`Tensor`; plain arrays and Python scalars
are accepted as constants. Convolution works internally in a
channel-major ``(C, N, H, W)`` layout so the patch matrix feeds a single
matmul without strided gathers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import _kernels as _k
from .tensor import Tensor, make_node

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        b = as_tensor(b)
        return as_tensor(a, like=b), b
    return a, as_tensor(b, like=a)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data * b.data, (a, b), "mul", bw)


def square(a: Tensor) -> Tensor:
    def bw(g):
        return (2.0 * a.data * g,)

    return make_node(a.data * a.data, (a,), "square", bw)


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(x, 0)``; the subgradient at exactly 0 is 0."""
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return make_node(x.data * mask, (x,), "relu", bw)


# ---------------------------------------------------------------- reductions / shape


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(np.asarray(out), (x,), "sum", bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        return (g.reshape(x.shape),)

    return make_node(x.data.reshape(shape), (x,), "reshape", bw)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)

    def bw(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return make_node(np.ascontiguousarray(x.data.transpose(axes)), (x,), "transpose", bw)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = list(xs)
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_node(np.concatenate([t.data for t in xs], axis=axis), xs, "concat", bw)


def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows ``x[index]`` along axis 0 (repeats allowed)."""
    index = np.asarray(index, dtype=np.intp)

    def bw(g):
        out = np.zeros_like(x.data)
        if index.size:
            # sorted segment sums: deterministic and much faster than np.add.at
            order = np.argsort(index, kind="stable")
            rows, starts = np.unique(index[order], return_index=True)
            out[rows] = np.add.reduceat(g[order], starts, axis=0)
        return (out,)

    return make_node(x.data[index], (x,), "take_rows", bw)


def pick(x: Tensor, labels) -> Tensor:
    """``x[i, labels[i]]`` for a 2-D tensor; the gather behind NLL losses."""
    labels = np.asarray(labels, dtype=np.intp)
    rows = np.arange(x.shape[0])

    def bw(g):
        out = np.zeros_like(x.data)
        out[rows, labels] = g
        return (out,)

    return make_node(x.data[rows, labels], (x,), "pick", bw)


# ---------------------------------------------------------------- dense layers


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        if ga is not None:
            ga = _unbroadcast(ga, a.shape)
        if gb is not None:
            gb = _unbroadcast(gb, b.shape)
        return ga, gb

    return make_node(a.data @ b.data, (a, b), "matmul", bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` over the last axis."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input has {x.shape[-1]} features, weight expects {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias shape {bias.shape} does not match {weight.shape[0]} outputs")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = g @ weight.data if x.requires_grad else None
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ x.data.reshape(-1, x.shape[-1]) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_node(out, parents, "linear", bw)


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax over the last axis with max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return make_node(out, (x,), "log_softmax", bw)


# ---------------------------------------------------------------- convolution


def _pad_channel_major(x: np.ndarray, p: int, channel_major: bool) -> np.ndarray:
    """Input -> zero-padded ``[C, N, H + 2p, W + 2p]``."""
    if channel_major:
        c, n, h, w = x.shape
        src = x
    else:
        n, c, h, w = x.shape
        src = x.transpose(1, 0, 2, 3)
    xt = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=x.dtype)
    xt[:, :, p : p + h, p : p + w] = src
    return xt


def _im2col(xt: np.ndarray, kh: int, kw: int, ho: int, wo: int) -> np.ndarray:
    """Padded channel-major input -> ``[C*kh*kw, N*ho*wo]`` patch matrix."""
    c, n = xt.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xt.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + ho, j : j + wo]
    return cols.reshape(c * kh * kw, n * ho * wo)


def conv2d(
    x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, padding: int = 1, layout: str = "NCHW"
) -> Tensor:
    """Stride-1 cross-correlation with zero padding.

    ``x`` is ``[N, Cin, H, W]`` and ``weight`` is ``[Cout, Cin, kh, kw]``.
    With ``layout="CNHW"`` input and output are channel-major
    (``[Cin, N, H, W]`` -> ``[Cout, N, H, W]``), which skips the layout
    transposes when convolutions are chained.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    if layout not in ("NCHW", "CNHW"):
        raise ValueError(f"unknown layout {layout!r}")
    cm = layout == "CNHW"
    if cm:
        c, n, h, w = x.shape
    else:
        n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if c != ci:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {ci}")
    if h <= 0 or w <= 0 or n <= 0:
        raise ValueError(f"conv2d: non-positive input dims {x.shape}")
    if padding < 0 or padding >= min(kh, kw):
        raise ValueError(f"conv2d: padding {padding} unsupported for a {kh}x{kw} kernel")
    ho, wo = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {x.shape}")

    cols = _im2col(_pad_channel_major(x.data, padding, cm), kh, kw, ho, wo)
    w2 = weight.data.reshape(co, -1)
    out = w2 @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(co, n, ho, wo)
    if not cm:
        out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gt = g if cm else g.transpose(1, 0, 2, 3)
        gw = (gt.reshape(co, -1) @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            # input gradient = full correlation of g with the flipped kernel
            q = kh - 1 - padding
            gpad = np.zeros((co, n, ho + 2 * q, wo + 2 * q), dtype=g.dtype)
            gpad[:, :, q : q + ho, q : q + wo] = gt
            gcols = _im2col(gpad, kh, kw, h, w)
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
            gx = (wflip @ gcols).reshape(c, n, h, w)
            if not cm:
                gx = np.ascontiguousarray(gx.transpose(1, 0, 2, 3))
        if bias is None:
            return gx, gw
        return gx, gw, gt.sum(axis=(1, 2, 3))

    return make_node(out, parents, "conv2d", bw)


# ---------------------------------------------------------------- batch norm


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer (not trainable)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    update_stats: bool = True,
    layout: str = "NCHW",
) -> Tensor:
    """Per-channel normalization over the batch and spatial axes.

    In training mode the batch statistics are used and, when
    ``update_stats`` is set, folded into the running estimates (the running
    variance uses the unbiased estimate). In eval mode the running
    statistics are used. ``layout="CNHW"`` puts channels on axis 0.
    """
    if layout == "NCHW":
        n, c, h, w = x.shape
        view, shape = (n, c, h * w), (1, c, 1, 1)
    elif layout == "CNHW":
        c, n, h, w = x.shape
        view, shape = (1, c, n * h * w), (c, 1, 1, 1)
    else:
        raise ValueError(f"unknown layout {layout!r}")
    if n == 0:
        raise ValueError("batch_norm2d: empty batch")
    eps = state.eps
    x3 = np.ascontiguousarray(x.data).reshape(view)
    if training:
        m = n * h * w
        if m < 2:
            raise ValueError("batch_norm2d: training mode needs at least 2 values per channel")
        out, mu, var = _k.bn_train_forward(x3, gamma.data, beta.data, eps)
        if update_stats:
            mom = state.momentum
            state.running_mean[...] = (1 - mom) * state.running_mean + mom * mu
            state.running_var[...] = (1 - mom) * state.running_var + mom * var * (m / (m - 1))

        def bw(g):
            gx, ggamma, gbeta = _k.bn_train_backward(
                np.ascontiguousarray(g).reshape(view), x3, mu, var, gamma.data, eps, x.requires_grad
            )
            gx = gx.reshape(x.shape) if x.requires_grad else None
            return gx, ggamma.astype(gamma.dtype), gbeta.astype(beta.dtype)

        return make_node(out.reshape(x.shape), (x, gamma, beta), "batch_norm2d", bw)

    inv = 1.0 / np.sqrt(state.running_var + eps)
    scale = (gamma.data * inv).astype(x.dtype)
    shift = (beta.data - state.running_mean * gamma.data * inv).astype(x.dtype)
    out = x.data * scale.reshape(shape)
    out += shift.reshape(shape)

    def bw(g):
        xhat = (x.data - state.running_mean.reshape(shape)) * inv.reshape(shape)
        gx = g * scale.reshape(shape) if x.requires_grad else None
        sum_axes = tuple(i for i in range(4) if shape[i] == 1)
        return gx, (g * xhat).sum(axis=sum_axes), g.sum(axis=sum_axes)

    return make_node(out, (x, gamma, beta), "batch_norm2d", bw)


# ---------------------------------------------------------------- pooling


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 over the last two axes.

    A trailing odd row/column is dropped. The backward pass routes each
    window's gradient to its maximum; ties go to the first cell in
    row-major order. The leading two axes are untouched, so the op serves
    both NCHW and CNHW layouts.
    """
    a, b, h, w = x.shape
    if h < 2 or w < 2:
        raise ValueError(f"max_pool2d: spatial dims {h}x{w} smaller than the 2x2 window")
    out, code = _k.pool_forward(np.ascontiguousarray(x.data))

    def bw(g):
        return (_k.pool_backward(np.ascontiguousarray(g), code, h, w),)

    return make_node(out, (x,), "max_pool2d", bw)
