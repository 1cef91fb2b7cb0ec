"""Differentiable building blocks.

Every op takes Tensors (or array-likes, treated as constants), computes its
forward value with numpy and registers a closure that maps the output adjoint
to input adjoints.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import Tensor, as_tensor, make_result

__all__ = [
    "add", "sub", "mul", "div", "neg", "matmul", "sum", "mean", "reshape",
    "transpose", "concat", "gather_rows", "where", "softmax", "log_softmax",
    "layer_norm", "batch_norm_1d", "BatchNormStats", "DegenerateBatchError",
    "relu", "gelu", "mse", "cross_entropy", "max_pool", "mean_pool",
    "dropout", "linear",
]


def _needs(t) -> bool:
    return isinstance(t, Tensor) and t.requires_grad


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _data(x):
    if isinstance(x, Tensor):
        return x.data
    if isinstance(x, (int, float)):
        return x  # python scalars stay weakly typed so float32 is preserved
    return np.asarray(x)


# --- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)

    def back(g):
        return (_unbroadcast(g, np.shape(ad)) if _needs(a) else None,
                _unbroadcast(g, np.shape(bd)) if _needs(b) else None)
    return make_result("add", ad + bd, (a, b), back)


def sub(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)

    def back(g):
        return (_unbroadcast(g, np.shape(ad)) if _needs(a) else None,
                _unbroadcast(-g, np.shape(bd)) if _needs(b) else None)
    return make_result("sub", ad - bd, (a, b), back)


def mul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)

    def back(g):
        return (_unbroadcast(g * bd, np.shape(ad)) if _needs(a) else None,
                _unbroadcast(g * ad, np.shape(bd)) if _needs(b) else None)
    return make_result("mul", ad * bd, (a, b), back)


def div(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)

    def back(g):
        return (_unbroadcast(g / bd, np.shape(ad)) if _needs(a) else None,
                _unbroadcast(-g * ad / (bd * bd), np.shape(bd)) if _needs(b) else None)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd
    return make_result("div", out, (a, b), back)


def neg(a) -> Tensor:
    return make_result("neg", -_data(a), (a,), lambda g: (-g,))


# --- linear algebra --------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product ``a @ b`` with numpy broadcasting of batch dims."""
    ad, bd = _data(a), _data(b)
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError(f"matmul needs ≥2-D operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if _needs(a) else None
        gb = None
        if _needs(b):
            if bd.ndim == 2:
                # shared weight: fold all batch axes into one product
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb
    return make_result("matmul", ad @ bd, (a, b), back)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` over the last axis; weight is (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# --- reductions and shape ops ----------------------------------------------

def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    xd = _data(x)
    out = xd.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xd.shape).copy(),)
    return make_result("sum", np.asarray(out), (x,), back)


def mean(x, axis=None, keepdims=False) -> Tensor:
    xd = _data(x)
    out = xd.mean(axis=axis, keepdims=keepdims)
    count = xd.size // max(np.asarray(out).size, 1)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, xd.shape).copy(),)
    return make_result("mean", np.asarray(out), (x,), back)


def reshape(x, shape: Sequence[int]) -> Tensor:
    xd = _data(x)
    return make_result("reshape", xd.reshape(shape), (x,), lambda g: (g.reshape(xd.shape),))


def transpose(x, axes=None) -> Tensor:
    xd = _data(x)
    axes = tuple(range(xd.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result("transpose", np.transpose(xd, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    datas = [_data(x) for x in xs]
    ax = axis % datas[0].ndim
    splits = np.cumsum([d.shape[ax] for d in datas])[:-1]

    def back(g):
        parts = np.split(g, splits, axis=ax)
        return tuple(p if _needs(x) else None for p, x in zip(parts, xs))
    return make_result("concat", np.concatenate(datas, axis=ax), tuple(xs), back)


def gather_rows(x, index: np.ndarray) -> Tensor:
    """Select rows along axis -2 per batch: x (..., n, d), index (..., m) -> (..., m, d)."""
    xd = _data(x)
    idx = np.asarray(index)[..., None]
    out = np.take_along_axis(xd, idx, axis=-2)

    def back(g):
        gx = np.zeros_like(xd)
        _scatter_add(gx, idx[..., 0], g)
        return (gx,)
    return make_result("gather_rows", out, (x,), back)


def _scatter_add(target: np.ndarray, index: np.ndarray, values: np.ndarray) -> None:
    lead = index.shape[:-1]
    grid = np.meshgrid(*[np.arange(n) for n in lead], indexing="ij") if lead else []
    keys = tuple(gr[..., None] for gr in grid) + (index,)
    np.add.at(target, keys, values)


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where mask is true, else ``b`` (mask is a constant)."""
    m = np.asarray(mask, dtype=bool)
    ad, bd = _data(a), _data(b)
    out = np.where(m, ad, bd)

    def back(g):
        ga = _unbroadcast(np.where(m, g, 0), np.shape(ad)) if _needs(a) else None
        gb = _unbroadcast(np.where(m, 0, g), np.shape(bd)) if _needs(b) else None
        return ga, gb
    return make_result("where", out, (a, b), back)


# --- normalisation and activations -----------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    xd = _data(x)
    z = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = z / z.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return make_result("softmax", y, (x,), back)


def log_softmax(x, axis: int = -1) -> Tensor:
    xd = _data(x)
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def back(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)
    return make_result("log_softmax", y, (x,), back)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    xd, gd, bd = _data(x), _data(gain), _data(bias)
    if gd.shape != (xd.shape[-1],) or bd.shape != (xd.shape[-1],):
        raise ValueError(f"layer_norm gain/bias {gd.shape}/{bd.shape} vs last dim {xd.shape[-1]}")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    lead = tuple(range(xd.ndim - 1))

    def back(g):
        gg = (g * xhat).sum(axis=lead) if _needs(gain) else None
        gb = g.sum(axis=lead) if _needs(bias) else None
        gx = None
        if _needs(x):
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb
    return make_result("layer_norm", xhat * gd + bd, (x, gain, bias), back)


class DegenerateBatchError(ValueError):
    """Batch statistics requested from a single value per channel."""


class BatchNormStats:
    """Running mean/variance buffers of a batch-norm layer."""

    def __init__(self, channels: int, momentum: float = 0.1, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum


def batch_norm_1d(x, gain, bias, stats: BatchNormStats, train: bool, eps: float = 1e-5) -> Tensor:
    """Normalise the last (channel) axis using statistics over all other axes."""
    xd, gd, bd = _data(x), _data(gain), _data(bias)
    lead = tuple(range(xd.ndim - 1))
    count = xd.size // xd.shape[-1]
    if not train:
        inv = 1.0 / np.sqrt(stats.var.astype(xd.dtype) + eps)
        xhat = (xd - stats.mean.astype(xd.dtype)) * inv

        def back_eval(g):
            return ((g * gd * inv) if _needs(x) else None,
                    (g * xhat).sum(axis=lead) if _needs(gain) else None,
                    g.sum(axis=lead) if _needs(bias) else None)
        return make_result("batch_norm_1d", xhat * gd + bd, (x, gain, bias), back_eval)

    if count < 2:
        raise DegenerateBatchError("batch_norm_1d in train mode needs more than one value per channel")
    mu = xd.mean(axis=lead)
    xc = xd - mu
    var = (xc * xc).mean(axis=lead)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    m = stats.momentum
    stats.mean = ((1 - m) * stats.mean + m * mu).astype(stats.mean.dtype)
    stats.var = ((1 - m) * stats.var + m * var * count / (count - 1)).astype(stats.var.dtype)

    def back(g):
        gg = (g * xhat).sum(axis=lead) if _needs(gain) else None
        gb = g.sum(axis=lead) if _needs(bias) else None
        gx = None
        if _needs(x):
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=lead) - xhat * (gh * xhat).mean(axis=lead))
        return gx, gg, gb
    return make_result("batch_norm_1d", xhat * gd + bd, (x, gain, bias), back)


def relu(x) -> Tensor:
    xd = _data(x)
    on = xd > 0
    return make_result("relu", np.where(on, xd, 0).astype(xd.dtype), (x,), lambda g: (g * on,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """tanh approximation."""
    xd = _data(x)
    u = _GELU_C * (xd + 0.044715 * (xd * xd * xd))
    t = np.tanh(u)
    y = 0.5 * xd * (1.0 + t)

    def back(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)
    return make_result("gelu", y, (x,), back)


# --- pooling, dropout -------------------------------------------------------

def max_pool(x, axis: int) -> Tensor:
    """Max over ``axis``; the gradient goes to the first (lowest-index) argmax."""
    xd = _data(x)
    ax = axis % xd.ndim
    arg = np.expand_dims(xd.argmax(axis=ax), ax)
    out = np.take_along_axis(xd, arg, axis=ax).squeeze(ax)

    def back(g):
        gx = np.zeros_like(xd)
        np.put_along_axis(gx, arg, np.expand_dims(g, ax), axis=ax)
        return (gx,)
    return make_result("max_pool", out, (x,), back)


def mean_pool(x, axis: int) -> Tensor:
    return mean(x, axis=axis)


def dropout(x, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    if not train or p <= 0.0:
        return x if isinstance(x, Tensor) else as_tensor(x)
    xd = _data(x)
    keep = (rng.random(xd.shape) >= p).astype(xd.dtype) / (1.0 - p)
    return make_result("dropout", xd * keep, (x,), lambda g: (g * keep,))


# --- losses ------------------------------------------------------------------

def mse(pred, target) -> Tensor:
    pd, td = _data(pred), _data(target)
    if pd.shape != td.shape:
        raise ValueError(f"mse shape mismatch: {pd.shape} vs {td.shape}")
    diff = pd - td
    n = diff.size

    def back(g):
        gp = g * 2.0 * diff / n
        return (gp if _needs(pred) else None, -gp if _needs(target) else None)
    return make_result("mse", np.asarray((diff * diff).sum() / n), (pred, target), back)


def cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` (..., C)."""
    lp = log_softmax(logits, axis=-1)
    labels = np.asarray(labels)
    onehot = np.zeros(lp.shape, dtype=lp.dtype)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    return neg(mul(sum(mul(lp, onehot)), 1.0 / labels.size))
