"""Differentiable forward ops over :class:`Tensor`.

Only same-shape elementwise arithmetic is supported (no general
broadcasting); layers carry their own bias handling.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..errors import ContractError, DimensionError, UnsupportedKernelError
from .core import Tensor, apply, as_tensor, report_macs


def _check_dtypes(*ts):
    dts = {t.dtype for t in ts if t is not None}
    if len(dts) > 1:
        raise DimensionError(f"dtype mismatch: {sorted(d.name for d in dts)}")


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {list(a.shape)} vs {list(b.shape)}")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, a.dtype)
    _same_shape("add", a, b)
    _check_dtypes(a, b)
    return apply("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, a.dtype)
    _same_shape("sub", a, b)
    _check_dtypes(a, b)
    return apply("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, a.dtype)
    _same_shape("mul", a, b)
    _check_dtypes(a, b)
    ad, bd = a.data, b.data
    return apply("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return apply("scale", x.data * x.dtype.type(c), (x,), lambda g: (g * c,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return apply("add_scalar", x.data + x.dtype.type(c), (x,), lambda g: (g,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return apply("exp", y, (x,), lambda g: (g * y,))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)

    def bw(g):
        return (g * s * (1.0 + xd * (1.0 - s)),)

    return apply("silu", xd * s, (x,), bw)


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    y = np.maximum(xd, 0) + np.log1p(np.exp(-np.abs(xd)))
    return apply("softplus", y, (x,), lambda g: (g * _sigmoid(xd),))


# ---------------------------------------------------------------------------
# reductions and shape ops

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    y = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return apply("sum", np.asarray(y, dtype=x.dtype), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return apply("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return apply("permute", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = list(xs)
    _check_dtypes(*xs)
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return apply("concat", np.concatenate([t.data for t in xs], axis=axis), tuple(xs), bw)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    shapes = {t.shape for t in xs}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ {sorted(map(list, shapes))}")
    _check_dtypes(*xs)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return apply("stack", np.stack([t.data for t in xs], axis=axis), tuple(xs), bw)


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Slice ``[start:stop]`` along one axis."""
    shape = x.shape
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[index] = g
        return (out,)

    return apply("narrow", x.data[index], (x,), bw)


def split(x: Tensor, sizes: Sequence[int], axis: int) -> list:
    if np.sum(sizes) != x.shape[axis]:
        raise DimensionError(f"split: sizes {list(sizes)} do not cover axis of length {x.shape[axis]}")
    out, start = [], 0
    for s in sizes:
        out.append(narrow(x, axis, start, start + s))
        start += s
    return out


def index_select(x: Tensor, index, axis: int) -> Tensor:
    index = np.asarray(index, dtype=np.intp)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        np.add.at(out, tuple(sl), g)
        return (out,)

    return apply("index_select", np.take(x.data, index, axis=axis), (x,), bw)


# ---------------------------------------------------------------------------
# layers

def linear(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``y = x Wᵀ + b`` over the last axis; ``W`` is ``[Dout, Din]``."""
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise DimensionError(f"linear: input {list(x.shape)} incompatible with weight {list(W.shape)}")
    if b is not None and b.shape != (W.shape[0],):
        raise DimensionError(f"linear: bias {list(b.shape)} does not match weight {list(W.shape)}")
    _check_dtypes(x, W, b)
    xd, Wd = x.data, W.data
    y = xd @ Wd.T
    if b is not None:
        y = y + b.data
    report_macs("linear", xd.size // W.shape[1] * W.size)

    def bw(g):
        gx = g @ Wd
        g2 = g.reshape(-1, g.shape[-1])
        gW = g2.T @ xd.reshape(-1, xd.shape[-1])
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gW, gb

    inputs = (x, W) if b is None else (x, W, b)
    return apply("linear", y, inputs, bw)


def _pads(kh, kw, padding):
    if kh % 2 == 0 or kw % 2 == 0:
        raise UnsupportedKernelError(f"kernel {kh}x{kw}: only odd kernel sizes are supported")
    if padding == "same":
        return kh // 2, kw // 2
    if padding == "valid":
        return 0, 0
    raise ContractError(f"padding must be 'same' or 'valid', got {padding!r}")


def _out_size(H, W, kh, kw, ph, pw, stride):
    Ho = (H + 2 * ph - kh) // stride + 1
    Wo = (W + 2 * pw - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {H}x{W}")
    return Ho, Wo


def depthwise_conv2d(x: Tensor, k: Tensor, stride: int = 1, padding: str = "same",
                     bias: Optional[Tensor] = None) -> Tensor:
    """Per-channel 2D convolution; ``x`` is NCHW and ``k`` is ``[C, kh, kw]``."""
    if x.ndim != 4 or k.ndim != 3 or k.shape[0] != x.shape[1]:
        raise DimensionError(f"depthwise_conv2d: input {list(x.shape)} vs kernel {list(k.shape)}")
    if bias is not None and bias.shape != (x.shape[1],):
        raise DimensionError(f"depthwise_conv2d: bias {list(bias.shape)} for {x.shape[1]} channels")
    _check_dtypes(x, k, bias)
    B, C, H, W = x.shape
    _, kh, kw = k.shape
    ph, pw = _pads(kh, kw, padding)
    s = int(stride)
    Ho, Wo = _out_size(H, W, kh, kw, ph, pw, s)
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    kd = k.data
    y = np.zeros((B, C, Ho, Wo), dtype=x.dtype)
    win = lambda i, j: (slice(None), slice(None), slice(i, i + s * (Ho - 1) + 1, s),  # noqa: E731
                        slice(j, j + s * (Wo - 1) + 1, s))
    for i in range(kh):
        for j in range(kw):
            y += xp[win(i, j)] * kd[None, :, i, j, None, None]
    if bias is not None:
        y += bias.data[None, :, None, None]
    report_macs("depthwise_conv2d", B * C * Ho * Wo * kh * kw)

    def bw(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(kd)
        for i in range(kh):
            for j in range(kw):
                w = win(i, j)
                gk[:, i, j] = np.einsum("bchw,bchw->c", g, xp[w])
                gxp[w] += g * kd[None, :, i, j, None, None]
        gx = gxp[:, :, ph:ph + H, pw:pw + W]
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gk, gb

    inputs = (x, k) if bias is None else (x, k, bias)
    return apply("depthwise_conv2d", y, inputs, bw)


def conv2d(x: Tensor, W: Tensor, stride: int = 1, padding: str = "same",
           bias: Optional[Tensor] = None) -> Tensor:
    """Dense 2D convolution; ``W`` is ``[Cout, Cin, kh, kw]``."""
    if x.ndim != 4 or W.ndim != 4 or W.shape[1] != x.shape[1]:
        raise DimensionError(f"conv2d: input {list(x.shape)} vs weight {list(W.shape)}")
    if bias is not None and bias.shape != (W.shape[0],):
        raise DimensionError(f"conv2d: bias {list(bias.shape)} for {W.shape[0]} output channels")
    _check_dtypes(x, W, bias)
    B, C, H, Wd_ = x.shape
    Cout, _, kh, kw = W.shape
    ph, pw = _pads(kh, kw, padding)
    s = int(stride)
    Ho, Wo = _out_size(H, Wd_, kh, kw, ph, pw, s)
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    Wd = W.data
    y = np.zeros((B, Cout, Ho, Wo), dtype=x.dtype)
    win = lambda i, j: (slice(None), slice(None), slice(i, i + s * (Ho - 1) + 1, s),  # noqa: E731
                        slice(j, j + s * (Wo - 1) + 1, s))
    for i in range(kh):
        for j in range(kw):
            y += np.matmul(Wd[:, :, i, j], xp[win(i, j)].reshape(B, C, Ho * Wo)).reshape(y.shape)
    if bias is not None:
        y += bias.data[None, :, None, None]
    report_macs("conv2d", B * Cout * Ho * Wo * C * kh * kw)

    def bw(g):
        gxp = np.zeros_like(xp)
        gW = np.empty_like(Wd)
        g3 = g.reshape(B, Cout, Ho * Wo)
        for i in range(kh):
            for j in range(kw):
                w = win(i, j)
                xw = xp[w].reshape(B, C, Ho * Wo)
                gW[:, :, i, j] = np.tensordot(g3, xw, axes=([0, 2], [0, 2]))
                gxp[w] += np.matmul(Wd[:, :, i, j].T, g3).reshape(B, C, Ho, Wo)
        gx = gxp[:, :, ph:ph + H, pw:pw + Wd_]
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gW, gb

    inputs = (x, W) if bias is None else (x, W, bias)
    return apply("conv2d", y, inputs, bw)


def pointwise_conv2d(x: Tensor, W: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """1x1 convolution mixing channels per pixel; ``W`` is ``[Cout, Cin]``."""
    if x.ndim != 4 or W.ndim != 2 or W.shape[1] != x.shape[1]:
        raise DimensionError(f"pointwise_conv2d: input {list(x.shape)} vs weight {list(W.shape)}")
    if bias is not None and bias.shape != (W.shape[0],):
        raise DimensionError(f"pointwise_conv2d: bias {list(bias.shape)} for {W.shape[0]} outputs")
    _check_dtypes(x, W, bias)
    xd, Wd = x.data, W.data
    B, C, H, Wi = xd.shape
    x3 = xd.reshape(B, C, H * Wi)
    y = np.matmul(Wd, x3).reshape(B, W.shape[0], H, Wi)
    if bias is not None:
        y += bias.data[None, :, None, None]
    report_macs("pointwise_conv2d", B * H * Wi * W.size)

    def bw(g):
        g3 = g.reshape(B, W.shape[0], H * Wi)
        gx = np.matmul(Wd.T, g3).reshape(xd.shape)
        gW = np.tensordot(g3, x3, axes=([0, 2], [0, 2]))
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gW, gb

    inputs = (x, W) if bias is None else (x, W, bias)
    return apply("pointwise_conv2d", y, inputs, bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the affine ``gamma, beta``."""
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise DimensionError(f"layer_norm: affine {list(gamma.shape)}/{list(beta.shape)} for last dim {D}")
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    _check_dtypes(x, gamma, beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    y = xhat * gd + beta.data

    def bw(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return apply("layer_norm", y, (x, gamma, beta), bw)


def channel_layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer norm across the channel axis of an NCHW map."""
    y = layer_norm(permute(x, (0, 2, 3, 1)), gamma, beta, eps)
    return permute(y, (0, 3, 1, 2))


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return apply("softmax", y, (x,), bw)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return apply("log_softmax", y, (x,), bw)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {list(logits.shape)} vs labels {list(labels.shape)}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ContractError("cross_entropy: label out of range")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = labels.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return apply("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), bw)
