"""Differentiable building blocks composed from :mod:`clipsr.tensor`."""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigurationError, DimensionError
from .tensor import (
    Tensor,
    _make,
    as_tensor,
    matmul,
    relu,
    sigmoid,
    softplus,
    sqrt,
    swapaxes,
    tabs,
)

__all__ = [
    "avg_pool2d",
    "conv2d",
    "cosine_similarity",
    "cross_entropy",
    "l2_normalize",
    "layer_norm",
    "linear",
    "log_softmax",
    "pixel_shuffle",
    "pixel_unshuffle",
    "relu",
    "scaled_dot_attention",
    "sigmoid",
    "softmax",
    "softplus",
]


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ConfigurationError(
            f"conv2d: extent {size} with kernel {k}, stride {stride}, pad {pad} "
            f"gives non-integral output ({span}/{stride} + 1)"
        )
    return span // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation.

    x is ``(N, C, H, W)``, weight ``(O, C, kh, kw)``. Implemented as
    im2col followed by one GEMM; the column buffer is kept for the backward
    pass.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ck, kh, kw = weight.shape
    if c != ck:
        raise DimensionError(f"conv2d: input channels {c} do not match kernel {weight.shape}")
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride].transpose(1, 0, 2, 3)
    cols2 = cols.reshape(c * kh * kw, n * ho * wo)
    w2 = weight.data.reshape(o, -1)
    out = (w2 @ cols2).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (g2 @ cols2.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(c, kh, kw, n, ho, wo)
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j].transpose(1, 0, 2, 3)
            gx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=1) if bias.requires_grad else None
        return gx, gw, gb

    return _make(out, parents, bw)


def _shuffle(data: np.ndarray, r: int) -> np.ndarray:
    n, cr2, h, w = data.shape
    c = cr2 // (r * r)
    return data.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)


def _unshuffle(data: np.ndarray, r: int) -> np.ndarray:
    n, c, hr, wr = data.shape
    h, w = hr // r, wr // r
    return data.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange ``(N, C*r*r, H, W)`` into ``(N, C, r*H, r*W)``.

    ``out[n, c, r*y + dy, r*x + dx] = in[n, c*r*r + dy*r + dx, y, x]``.
    """
    if x.ndim != 4:
        raise DimensionError(f"pixel_shuffle expects a 4-D tensor, got {x.shape}")
    if r < 1 or x.shape[1] % (r * r):
        raise ConfigurationError(f"pixel_shuffle: {x.shape[1]} channels not divisible by r^2={r * r}")
    return _make(_shuffle(x.data, r), (x,), lambda g: (_unshuffle(g, r),))


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    if x.ndim != 4:
        raise DimensionError(f"pixel_unshuffle expects a 4-D tensor, got {x.shape}")
    if r < 1 or x.shape[2] % r or x.shape[3] % r:
        raise ConfigurationError(f"pixel_unshuffle: spatial extent {x.shape[2:]} not divisible by {r}")
    return _make(_unshuffle(x.data, r), (x,), lambda g: (_shuffle(g, r),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _make(out, (x,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-wise logits."""
    targets = np.asarray(targets, dtype=np.int64)
    lp = log_softmax(logits, axis=-1)
    picked = lp[np.arange(len(targets)), targets]
    return -picked.mean()


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask=None, return_weights: bool = False):
    """``softmax(q k^T / sqrt(d) + mask) v`` over the last two axes.

    ``mask`` is additive and broadcast against the ``(..., Lq, Lk)`` scores.
    """
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"attention: query width {q.shape} differs from key width {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention: key length {k.shape} differs from value length {v.shape}")
    d = q.shape[-1]
    scores = matmul(q, swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d))
    if mask is not None:
        scores = scores + as_tensor(mask, dtype=q.dtype)
    weights = softmax(scores, axis=-1)
    out = matmul(weights, v)
    return (out, weights) if return_weights else out


def _standardize(x: Tensor, axis: int, eps: float) -> Tensor:
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        return (inv * (g - g.mean(axis=axis, keepdims=True) - xhat * (g * xhat).mean(axis=axis, keepdims=True)),)

    return _make(xhat.astype(x.dtype), (x,), bw)


def layer_norm(x: Tensor, axis: int = -1, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    out = _standardize(x, axis, eps)
    if gain is not None:
        out = out * gain
    if bias is not None:
        out = out + bias
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out + bias if bias is not None else out


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ConfigurationError(f"avg_pool2d: extent {(h, w)} not divisible by {k}")
    return x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    return x / sqrt((x * x).sum(axis=axis, keepdims=True) + eps)


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    return (l2_normalize(a, axis) * l2_normalize(b, axis)).sum(axis=axis)


def l1_mean(a: Tensor, b: Tensor) -> Tensor:
    return tabs(a - b).mean()
