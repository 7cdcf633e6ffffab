"""Differentiable primitives.

Every function takes :class:`~fanet.autograd.Tensor` operands (plain arrays
and scalars are wrapped as constants) and returns a graph-linked tensor whose
backward rule is registered at construction.  Feature maps use N, C, H, W
layout throughout.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .autograd import Tensor, as_tensor
from .errors import ConfigError, DegenerateStatisticsError, LabelError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(a.data * b.data, (a, b), backward, "mul")


def scale(x, factor: float) -> Tensor:
    x = as_tensor(x)
    factor = float(factor)

    def backward(g):
        return (g * factor,)

    return Tensor._make(x.data * x.data.dtype.type(factor), (x,), backward, "scale")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return Tensor._make(np.where(mask, x.data, x.data.dtype.type(0)), (x,), backward, "relu")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)

    def backward(g):
        return (g * y * (1.0 - y),)

    return Tensor._make(y, (x,), backward, "sigmoid")


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(x.shape),)

    return Tensor._make(data, (x,), backward, "reshape")


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)

    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._make(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward, "sum")


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.size

    def backward(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return Tensor._make(np.asarray(x.data.mean(), dtype=x.dtype), (x,), backward, "mean")


# -- linear algebra ------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product of two 2-D tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return Tensor._make(a.data @ b.data, (a, b), backward, "matmul")


def matvec(m, v) -> Tensor:
    """``m @ v`` for a matrix [R, C] and a vector [C]."""
    m, v = as_tensor(m), as_tensor(v)
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ShapeError(f"matvec: incompatible shapes {m.shape} and {v.shape}")

    def backward(g):
        gm = np.outer(g, v.data) if m.requires_grad else None
        gv = m.data.T @ g if v.requires_grad else None
        return gm, gv

    return Tensor._make(m.data @ v.data, (m, v), backward, "matvec")


def linear(z, w, b=None) -> Tensor:
    """Batched fully connected layer: rows of ``z`` [N, in] times ``w`` [out, in]."""
    z, w = as_tensor(z), as_tensor(w)
    if z.ndim != 2 or w.ndim != 2 or z.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {z.shape} does not match weight {w.shape}")
    out = z.data @ w.data.T
    parents = [z, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
        out = out + b.data
        parents.append(b)

    def backward(g):
        gz = g @ w.data if z.requires_grad else None
        gw = g.T @ z.data if w.requires_grad else None
        if b is None:
            return gz, gw
        return gz, gw, g.sum(axis=0)

    return Tensor._make(out, parents, backward, "linear")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 1, in the given order."""
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[:1] != ref[:1] or t.shape[2:] != ref[2:]:
            raise ShapeError(
                "concat_channels: shapes " + ", ".join(str(t.shape) for t in tensors) + " differ outside axis 1"
            )
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=1))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=1), tensors, backward, "concat")


# -- convolution and pooling ---------------------------------------------

def conv_output_extent(extent: int, k: int, stride: int, padding: int, strict: bool = True) -> int:
    span = extent + 2 * padding - k
    if span < 0 or (strict and span % stride):
        raise ConfigError(
            f"conv2d: extent {extent} with k={k}, stride={stride}, padding={padding} "
            f"gives non-integral output ({span}/{stride} + 1)"
        )
    return span // stride + 1


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0, strict: bool = True) -> Tensor:
    """2-D cross-correlation with zero padding.

    With ``strict`` a stride that does not tile the padded input exactly is
    a :class:`ConfigError`; otherwise trailing rows/columns are dropped
    (floor semantics).  Implemented as one (C_out x C_in*k*k) GEMM against a
    channel-major column buffer.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != x.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape} does not match kernel {w.shape}")
    n, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    ho = conv_output_extent(h, k, stride, padding, strict)
    wo = conv_output_extent(wd, k, stride, padding, strict)
    hp, wp = h + 2 * padding, wd + 2 * padding

    # channel-major padded input: [C_in, N, Hp, Wp]
    xc = np.zeros((c_in, n, hp, wp), dtype=x.dtype)
    xc[:, :, padding:padding + h, padding:padding + wd] = x.data.transpose(1, 0, 2, 3)

    def window(arr, di, dj):
        return arr[:, :, di:di + stride * (ho - 1) + 1:stride, dj:dj + stride * (wo - 1) + 1:stride]

    if k == 1 and stride == 1 and padding == 0:
        cols = xc.reshape(c_in, n * ho * wo)
    else:
        cols = np.empty((c_in, k, k, n, ho, wo), dtype=x.dtype)
        for di in range(k):
            for dj in range(k):
                cols[:, di, dj] = window(xc, di, dj)
        cols = cols.reshape(c_in * k * k, n * ho * wo)
    wm = w.data.reshape(c_out, c_in * k * k)
    out = (wm @ cols).reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (c_out,):
            raise ShapeError(f"conv2d: bias {b.shape} does not match kernel {w.shape}")
        out = out + b.data.reshape(1, c_out, 1, 1)
        parents.append(b)
    out = np.ascontiguousarray(out)

    def backward(g):
        gm = g.transpose(1, 0, 2, 3).reshape(c_out, n * ho * wo)
        gx = gw = None
        if w.requires_grad:
            gw = (gm @ cols.T).reshape(w.shape)
        if x.requires_grad:
            gcols = (wm.T @ gm).reshape(c_in, k, k, n, ho, wo)
            gxc = np.zeros_like(xc)
            for di in range(k):
                for dj in range(k):
                    window(gxc, di, dj)[...] += gcols[:, di, dj]
            gx = np.ascontiguousarray(gxc[:, :, padding:padding + h, padding:padding + wd].transpose(1, 0, 2, 3))
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Tensor._make(out, parents, backward, "conv2d")


def maxpool2d(x) -> Tensor:
    """2x2 max pooling with stride 2.

    Ties route the gradient to the first window element in row-major order.
    """
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool2d: needs N,C,H,W with even H and W, got {x.shape}")
    n, c, h, w = x.shape
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return Tensor._make(out, (x,), backward, "maxpool2d")


def bilinear_matrix(extent: int, factor: int = 2, dtype=np.float64) -> np.ndarray:
    """Interpolation weights [factor*extent, extent] with half-pixel centres.

    Output index o samples source coordinate (o + 0.5) / factor - 0.5,
    clamped to the valid range at the borders.
    """
    out_extent = extent * factor
    mat = np.zeros((out_extent, extent), dtype=dtype)
    for o in range(out_extent):
        src = max((o + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(math.floor(src)), extent - 1)
        i1 = min(i0 + 1, extent - 1)
        frac = src - i0
        mat[o, i0] += 1.0 - frac
        mat[o, i1] += frac
    return mat


def upsample_bilinear(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    if factor != 2:
        raise ConfigError(f"upsample_bilinear: only factor 2 is supported, got {factor}")
    if x.ndim != 4:
        raise ShapeError(f"upsample_bilinear: needs N,C,H,W, got {x.shape}")
    uh = bilinear_matrix(x.shape[2], factor, x.dtype)
    uw = bilinear_matrix(x.shape[3], factor, x.dtype)
    out = np.matmul(np.matmul(uh, x.data), uw.T)

    def backward(g):
        return (np.matmul(np.matmul(uh.T, g), uw),)

    return Tensor._make(out, (x,), backward, "upsample_bilinear")


def global_avg_pool(x) -> Tensor:
    """Squeeze each channel to its spatial mean: [N, C, H, W] -> [N, C]."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: needs N,C,H,W, got {x.shape}")
    area = x.shape[2] * x.shape[3]

    def backward(g):
        return (np.broadcast_to((g / area)[:, :, None, None], x.shape).copy(),)

    return Tensor._make(x.data.mean(axis=(2, 3)), (x,), backward, "global_avg_pool")


def channel_scale(x, s) -> Tensor:
    """Multiply every pixel of channel c by ``s[n, c]``."""
    x, s = as_tensor(x), as_tensor(s)
    if x.ndim != 4 or s.shape != x.shape[:2]:
        raise ShapeError(f"channel_scale: scales {s.shape} do not match feature map {x.shape}")
    return mul(x, reshape(s, s.shape + (1, 1)))


# -- normalisation -------------------------------------------------------

class BatchNormState:
    """Running mean/variance buffers for one batch-norm layer."""

    def __init__(self, channels: int, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)


def batchnorm2d(x, gamma, beta, state: BatchNormState, training: bool = True,
                momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalisation over N, H, W.

    Training mode normalises with the (biased) batch variance and folds the
    batch statistics into ``state`` with the given momentum; the running
    variance uses the unbiased estimate.  Eval mode uses ``state`` only.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm2d: input {x.shape} with gamma {gamma.shape}, beta {beta.shape}")
    c = x.shape[1]
    count = x.shape[0] * x.shape[2] * x.shape[3]
    gshape = (1, c, 1, 1)

    if training:
        if count < 2:
            raise DegenerateStatisticsError(
                f"batchnorm2d: training statistics need N*H*W >= 2, got {count} for input {x.shape}"
            )
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        state.running_mean[...] = (1 - momentum) * state.running_mean + momentum * mu
        state.running_var[...] = (1 - momentum) * state.running_var + momentum * var * count / (count - 1)
    else:
        mu = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)

    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(gshape)) * inv_std.reshape(gshape)
    out = gamma.data.reshape(gshape) * xhat + beta.data.reshape(gshape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(gshape)
            if training:
                gx = (inv_std.reshape(gshape) / count) * (
                    count * gxhat
                    - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                )
            else:
                gx = gxhat * inv_std.reshape(gshape)
        return gx, ggamma, gbeta

    return Tensor._make(out, (x, gamma, beta), backward, "batchnorm2d")


# -- loss ----------------------------------------------------------------

def softmax_cross_entropy(logits, targets) -> Tensor:
    """Mean per-pixel negative log-likelihood of ``targets`` under softmax(logits).

    ``logits`` is [N, K, H, W]; ``targets`` an integer array [N, H, W].
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if logits.ndim != 4 or targets.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    k = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        bad = targets[(targets < 0) | (targets >= k)][0]
        raise LabelError(f"softmax_cross_entropy: target id {bad} outside [0, {k})")
    targets = targets.astype(np.intp)

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(denom)
    picked = np.take_along_axis(log_probs, targets[:, None], axis=1)
    count = targets.size
    loss = np.asarray(-picked.sum() / count, dtype=logits.dtype)

    def backward(g):
        grad = exp / denom
        np.put_along_axis(grad, targets[:, None], np.take_along_axis(grad, targets[:, None], axis=1) - 1.0, axis=1)
        return (grad * (g / count),)

    return Tensor._make(loss, (logits,), backward, "softmax_cross_entropy")
