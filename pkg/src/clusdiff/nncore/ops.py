"""Differentiable ops over :class:`~clusdiff.nncore.tensor.Tensor`.

Every op returns a new tensor; inputs are never mutated.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from clusdiff.errors import ConfigError, ShapeError
from clusdiff.nncore.tensor import Tensor, as_tensor

NORM_VAR_FLOOR = 1e-5


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None and np.isscalar(x):
        return Tensor(np.asarray(x, dtype=like.dtype))
    return as_tensor(x)


# elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data + b.data
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._from_op(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data - b.data
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor._from_op(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = _lift(a)
        c = float(b)

        def backward_scalar(g):
            return (g * c,)

        return Tensor._from_op(a.data * c, (a,), backward_scalar, "mul")
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._from_op(out, (a, b), backward, "mul")


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data

    def backward(g):
        return (-g * out * out,)

    return Tensor._from_op(out, (a,), backward, "reciprocal")


def square(a: Tensor) -> Tensor:
    ad = a.data

    def backward(g):
        return (2.0 * g * ad,)

    return Tensor._from_op(ad * ad, (a,), backward, "square")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return Tensor._from_op(out, (a,), backward, "exp")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return Tensor._from_op(out, (a,), backward, "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = a.data * mask

    def backward(g):
        return (g * mask,)

    return Tensor._from_op(out, (a,), backward, "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form cannot overflow
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)

    def backward(g):
        return (g * s * (1.0 - s),)

    return Tensor._from_op(s, (a,), backward, "sigmoid")


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    x = a.data
    s = _sigmoid(x)
    out = x * s

    def backward(g):
        return (g * (s * (1.0 + x * (1.0 - s))),)

    return Tensor._from_op(out, (a,), backward, "silu")


# reductions and shape ops ------------------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Tensor._from_op(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([shape[i] for i in axes]))
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape),)

    return Tensor._from_op(out, (a,), backward, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(orig),)

    return Tensor._from_op(out, (a,), backward, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def backward(g):
        return (g.transpose(inv),)

    return Tensor._from_op(out, (a,), backward, "transpose")


def concat(tensors, axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    splits = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(out, tuple(tensors), backward, "concat")


def take_rows(table: Tensor, idx) -> Tensor:
    """Gather rows ``table[idx]`` (embedding lookup)."""
    idx = np.asarray(idx, dtype=np.int64)
    out = table.data[idx]
    shape = table.shape

    def backward(g):
        gt = np.zeros(shape, dtype=g.dtype)
        np.add.at(gt, idx, g)
        return (gt,)

    return Tensor._from_op(out, (table,), backward, "take_rows")


# linear algebra ----------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching semantics over leading dims."""
    a = _lift(a)
    b = _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._from_op(out, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` applied over the last axis of ``x`` (w is [in, out])."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(lead + (w.shape[1],))
    wd = w.data

    def backward(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(lead + (wd.shape[0],))
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out, parents, backward, "linear")


# convolution -------------------------------------------------------------------

def _conv_raw(x: np.ndarray, k: np.ndarray, stride: int):
    """3x3 pad-1 convolution on arrays; returns (NHWC output, im2col matrix).

    Columns are gathered channels-last (``[.., 3, 3, C]``) so each copy moves
    contiguous channel runs.
    """
    B, C, H, W = x.shape
    cout = k.shape[0]
    ho = -(-H // stride)
    wo = -(-W // stride)
    xp = np.zeros((B, H + 2, W + 2, C), dtype=x.dtype)
    xp[:, 1:H + 1, 1:W + 1, :] = x.transpose(0, 2, 3, 1)
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * ho * wo, 9 * C)
    out = cols @ k.transpose(0, 2, 3, 1).reshape(cout, 9 * C).T
    return out.reshape(B, ho, wo, cout), cols


def conv2d(x: Tensor, k: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """3x3 convolution with padding 1.

    Args:
        x: input ``[B, C_in, H, W]`` (a single ``[C_in, H, W]`` image is accepted).
        k: kernel ``[C_out, C_in, 3, 3]``.
        bias: optional ``[C_out]``.
        stride: 1 or 2.

    Returns:
        ``[B, C_out, ceil(H/stride), ceil(W/stride)]``.
    """
    if x.ndim == 3:
        out = conv2d(reshape(x, (1,) + x.shape), k, bias, stride)
        return reshape(out, out.shape[1:])
    if k.ndim != 4 or k.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d expects a [C_out, C_in, 3, 3] kernel, got {k.shape}")
    if stride not in (1, 2):
        raise ConfigError(f"conv2d stride must be 1 or 2, got {stride}")
    B, C, H, W = x.shape
    cout = k.shape[0]
    if k.shape[1] != C:
        raise ShapeError(f"conv2d channel mismatch: input {C}, kernel {k.shape[1]}")
    out, cols = _conv_raw(x.data, k.data, stride)
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    ho, wo = out.shape[2:]
    kd = k.data

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(B * ho * wo, cout)
        gk = (gm.T @ cols).reshape(cout, 3, 3, C).transpose(0, 3, 1, 2)
        # input gradient = stride-1 convolution of the (zero-dilated) output
        # gradient with the spatially flipped, channel-swapped kernel
        if stride == 1:
            gd = g
        else:
            gd = np.zeros((B, cout, H, W), dtype=g.dtype)
            gd[:, :, 0:stride * ho:stride, 0:stride * wo:stride] = g
        kflip = np.ascontiguousarray(kd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx = _conv_raw(gd, kflip, 1)[0].transpose(0, 3, 1, 2)
        if bias is None:
            return gx, gk
        return gx, gk, gm.sum(axis=0)

    parents = (x, k) if bias is None else (x, k, bias)
    return Tensor._from_op(out, parents, backward, "conv2d")


def conv1x1(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Pointwise channel mix; ``w`` is ``[C_out, C_in]``."""
    B, C, H, W = x.shape
    if w.shape[1] != C:
        raise ShapeError(f"conv1x1 channel mismatch: input {C}, weight {w.shape[1]}")
    tokens = transpose(reshape(x, (B, C, H * W)), (0, 2, 1))
    y = linear(tokens, transpose(w), bias)
    return reshape(transpose(y, (0, 2, 1)), (B, w.shape[0], H, W))


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of ``[B, C, H, W]``."""
    B, C, H, W = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (B, C, H, 2, W, 2)).reshape(B, C, 2 * H, 2 * W)

    def backward(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward, "upsample2x")


def avg_pool(x: Tensor, k: int) -> Tensor:
    """Non-overlapping ``k x k`` average pooling."""
    B, C, H, W = x.shape
    if H % k or W % k:
        raise ShapeError(f"avg_pool: {H}x{W} not divisible by {k}")
    out = x.data.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5))

    def backward(g):
        gg = np.broadcast_to(g[:, :, :, None, :, None] / (k * k), (B, C, H // k, k, W // k, k))
        return (gg.reshape(B, C, H, W),)

    return Tensor._from_op(out, (x,), backward, "avg_pool")


# normalization / attention helpers -----------------------------------------------

def group_norm(x: Tensor, groups: int, gain: Tensor | None = None, bias: Tensor | None = None) -> Tensor:
    """Group normalization over ``[B, C, ...]`` with a variance floor of 1e-5."""
    B, C = x.shape[:2]
    if groups <= 0 or C % groups:
        raise ConfigError(f"group_norm: {groups} groups do not divide {C} channels")
    spatial = x.shape[2:]
    xg = x.data.reshape(B, groups, -1)
    n = xg.shape[-1]
    mu = xg.mean(axis=-1, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    floored = var < NORM_VAR_FLOOR
    inv = 1.0 / np.sqrt(np.maximum(var, NORM_VAR_FLOOR))
    xhat = xc * inv
    bshape = (1, C) + (1,) * len(spatial)
    xhat_full = xhat.reshape(x.shape)
    out = xhat_full
    if gain is not None:
        out = out * gain.data.reshape(bshape)
    if bias is not None:
        out = out + bias.data.reshape(bshape)
    red_axes = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        grads = []
        gx_hat = g if gain is None else g * gain.data.reshape(bshape)
        gh = gx_hat.reshape(B, groups, n)
        # var floored groups: inv is constant, only the mean path remains
        dvar_term = np.where(floored, 0.0, (gh * xhat).mean(axis=-1, keepdims=True))
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * dvar_term)
        grads.append(gx.reshape(x.shape))
        if gain is not None:
            grads.append((g * xhat_full).sum(axis=red_axes))
        if bias is not None:
            grads.append(g.sum(axis=red_axes))
        return tuple(grads)

    parents = [x]
    if gain is not None:
        parents.append(gain)
    if bias is not None:
        parents.append(bias)
    return Tensor._from_op(out, tuple(parents), backward, "group_norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(y, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (x,), backward, "log_softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {labels.shape} labels for {n} rows")
    lp = log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(n), labels] = -1.0 / n
    return sum(mul(lp, Tensor(onehot)))


def mse(pred: Tensor, target) -> Tensor:
    """Mean of squared differences over all elements."""
    target = _lift(target, pred)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    out = np.asarray((diff * diff).mean(), dtype=pred.dtype)
    n = diff.size

    def backward(g):
        gp = (2.0 / n) * g * diff
        return gp, -gp

    return Tensor._from_op(out, (pred, target), backward, "mse")


def sinusoidal_time_embed(t, dim: int, dtype=np.float64) -> np.ndarray:
    """Interleaved sin/cos features of integer step(s) ``t``.

    Frequencies are geometric, from 1 down to 1e-4 (periods 2*pi to 2*pi*1e4).
    Returns shape ``[dim]`` for scalar ``t`` and ``[len(t), dim]`` otherwise.
    """
    if dim <= 0 or dim % 2:
        raise ConfigError(f"time embedding dim must be positive and even, got {dim}")
    half = dim // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = np.exp(-math.log(1e4) * np.arange(half) / (half - 1))
    tt = np.asarray(t, dtype=np.float64)
    ang = tt[..., None] * freqs
    out = np.empty(tt.shape + (dim,), dtype=np.float64)
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out.astype(dtype, copy=False)
