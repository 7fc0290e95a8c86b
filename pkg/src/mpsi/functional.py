"""Differentiable primitives the network is assembled from.

Heavy operations (linear maps, normalization, convolution, softmax) are fused:
one graph node with a hand-written backward rather than a chain of
elementwise nodes.  Each one is checked against central finite differences in
``mpsi.gradcheck``.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

from .tensor import (
    DTYPE,
    ConfigError,
    ShapeError,
    Tensor,
    as_tensor,
    gather_axis,
    make_result,
    reshape,
    transpose,
    unbroadcast,
)

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ================================================================ affine maps


def linear_projection(x, w, b=None) -> Tensor:
    """``x @ w.T + b`` over the last axis of ``x``; ``w`` has shape (out_dim, in_dim)."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear_projection: input shape {x.shape} incompatible with weight shape {w.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear_projection: bias shape {b.shape} does not match weight shape {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[1])
    out = x2 @ w.data.T
    if b is not None:
        out = out + b.data
    out = out.reshape(*lead, w.shape[0])

    def backward(g):
        g2 = g.reshape(-1, w.shape[0])
        gx = (g2 @ w.data).reshape(x.shape)
        gw = g2.T @ x2
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, backward, "linear")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize each token over the last axis (population variance), then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1] if x.ndim else 0
    if c == 0:
        raise ShapeError("layer_norm: normalized axis is empty")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match channels {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        gxhat = g * gamma.data
        gx = inv_std * (
            gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        reduce_axes = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=reduce_axes), g.sum(axis=reduce_axes)

    return make_result(out, (x, gamma, beta), backward, "layer_norm")


# ================================================================ activations


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    return make_result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


_OPEN_LO, _OPEN_HI = np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0)


def gate_sigmoid(x) -> Tensor:
    """Sigmoid kept strictly inside (0, 1) in float64.

    expit saturates to exactly 1.0 once the logit passes ~36.7; the tails are
    pinned to the nearest interior doubles, a change of at most one ulp.
    """
    x = as_tensor(x)
    s = np.clip(expit(x.data), _OPEN_LO, _OPEN_HI)
    return make_result(s, (x,), lambda g: (g * s * (1.0 - s),), "gate_sigmoid")


def silu(x) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    out = x.data * s
    return make_result(out, (x,), lambda g: (g * s * (1.0 + x.data * (1.0 - s)),), "silu")


def gelu(x) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF written via erf."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return make_result(out, (x,), backward, "gelu")


def softplus(x) -> Tensor:
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.data)
    return make_result(out, (x,), lambda g: (g * expit(x.data),), "softplus")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError("softmax: normalized axis is empty")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_result(s, (x,), backward, "softmax")


# ================================================================ convolution


def _pad4(padding) -> tuple[int, int, int, int]:
    """Normalize padding to (top, bottom, left, right)."""
    if isinstance(padding, int):
        return (padding,) * 4
    padding = tuple(int(p) for p in padding)
    if len(padding) == 2:
        return (padding[0], padding[0], padding[1], padding[1])
    if len(padding) == 4:
        return padding
    raise ConfigError(f"conv2d: padding must be int, (ph, pw) or (top, bottom, left, right), got {padding}")


def conv2d(x, kernel, bias=None, padding=0, depthwise: bool = False) -> Tensor:
    """Stride-1 cross-correlation with zero padding.

    ``kernel`` is (Cout, Cin, kh, kw), or (C, 1, kh, kw) when ``depthwise``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {kernel.shape}")
    bsz, cin, h, w = x.shape
    cout, kin, kh, kw = kernel.shape
    if depthwise:
        if kin != 1 or cout != cin:
            raise ShapeError(f"conv2d: depthwise kernel {kernel.shape} does not match {cin} input channels")
    elif kin != cin:
        raise ShapeError(f"conv2d: kernel {kernel.shape} expects {kin} input channels, input has {cin}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {cout} output channels")
    top, bottom, left, right = _pad4(padding)
    hp, wp = h + top + bottom, w + left + right
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho, wo = hp - kh + 1, wp - kw + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)))
    k = kernel.data

    if depthwise:
        out = np.zeros((bsz, cout, ho, wo), dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                out += xp[:, :, i : i + ho, j : j + wo] * k[None, :, 0, i, j, None, None]
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (B, Cin, Ho, Wo, kh, kw)
        out = np.tensordot(win, k, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        out = np.ascontiguousarray(out)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(k)
        if depthwise:
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, :, i : i + ho, j : j + wo]
                    gk[:, 0, i, j] = (g * patch).sum(axis=(0, 2, 3))
                    gxp[:, :, i : i + ho, j : j + wo] += g * k[None, :, 0, i, j, None, None]
        else:
            gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # (Cout, Cin, kh, kw)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + ho, j : j + wo] += np.einsum("bohw,oc->bchw", g, k[:, :, i, j], optimize=True)
        gx = gxp[:, :, top : top + h, left : left + w]
        grads = [np.ascontiguousarray(gx), gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result(out, parents, backward, "dwconv2d" if depthwise else "conv2d")


def causal_conv1d(x, kernel, bias=None) -> Tensor:
    """Depthwise causal convolution along the sequence axis.

    ``x`` is (B, L, D), ``kernel`` is (D, width).  The input is left-padded
    with ``width - 1`` zeros so output ``t`` sees only positions ``<= t``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 2 or kernel.shape[0] != x.shape[2]:
        raise ShapeError(f"causal_conv1d: input {x.shape} incompatible with kernel {kernel.shape}")
    bsz, length, d = x.shape
    width = kernel.shape[1]
    xp = np.pad(x.data, ((0, 0), (width - 1, 0), (0, 0)))
    k = kernel.data
    out = np.zeros(x.shape, dtype=DTYPE)
    for j in range(width):
        out += xp[:, j : j + length, :] * k[:, j]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data

    def backward(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(k)
        for j in range(width):
            gk[:, j] = (g * xp[:, j : j + length, :]).sum(axis=(0, 1))
            gxp[:, j : j + length, :] += g * k[:, j]
        grads = [np.ascontiguousarray(gxp[:, width - 1 :, :]), gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1)))
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result(out, parents, backward, "causal_conv1d")


# ================================================================= rearrange


def pixel_shuffle(x, r: int) -> Tensor:
    """(B, C*r*r, H, W) -> (B, C, r*H, r*W); channel c*r*r + dy*r + dx lands at (r*h + dy, r*w + dx)."""
    x = as_tensor(x)
    bsz, crr, h, w = x.shape
    if r < 1 or crr % (r * r):
        raise ConfigError(f"pixel_shuffle: {crr} channels not divisible by r^2 = {r * r}")
    c = crr // (r * r)
    y = reshape(x, (bsz, c, r, r, h, w))
    y = transpose(y, (0, 1, 4, 2, 5, 3))
    return reshape(y, (bsz, c, h * r, w * r))


def pixel_unshuffle(x, r: int) -> Tensor:
    """Exact inverse of :func:`pixel_shuffle`."""
    x = as_tensor(x)
    bsz, c, hr, wr = x.shape
    if r < 1 or hr % r or wr % r:
        raise ConfigError(f"pixel_unshuffle: spatial extents {hr}x{wr} not divisible by {r}")
    h, w = hr // r, wr // r
    y = reshape(x, (bsz, c, h, r, w, r))
    y = transpose(y, (0, 1, 3, 5, 2, 4))
    return reshape(y, (bsz, c * r * r, h, w))


def adaptive_avg_pool_to_1(x) -> Tensor:
    """Per-channel spatial mean: (B, C, H, W) -> (B, C, 1)."""
    x = as_tensor(x)
    bsz, c, h, w = x.shape
    return reshape(x.mean(axis=(2, 3)), (bsz, c, 1))


def _pad_indices(n: int, lo: int, hi: int, mode: str) -> np.ndarray:
    if n == 1 and mode == "reflect":
        mode = "edge"
    return np.pad(np.arange(n), (lo, hi), mode=mode)


def pad2d(x, pad: Sequence[int], mode: str = "reflect", axes: tuple[int, int] = (2, 3)) -> Tensor:
    """Index-based 2-D padding (reflect or edge) along ``axes``; pad = (top, bottom, left, right)."""
    x = as_tensor(x)
    top, bottom, left, right = pad
    ah, aw = axes
    y = x
    if top or bottom:
        y = gather_axis(y, _pad_indices(x.shape[ah], top, bottom, mode), axis=ah)
    if left or right:
        y = gather_axis(y, _pad_indices(x.shape[aw], left, right, mode), axis=aw)
    return y


# ===================================================================== losses


def l1_loss(pred, target) -> Tensor:
    """Mean absolute error; differentiable with subgradient 0 at exact ties."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: shapes differ, {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        s = np.sign(diff) * (g / n)
        return s, -s

    return make_result(np.array(np.abs(diff).mean()), (pred, target), backward, "l1")


def mse_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shapes differ, {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        s = diff * (2.0 * g / n)
        return s, -s

    return make_result(np.array((diff * diff).mean()), (pred, target), backward, "mse")


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """``x / max(||x||, eps)`` along ``axis``."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = x.data / denom

    def backward(g):
        inside = norm > eps
        proj = (g * out).sum(axis=axis, keepdims=True)
        gx = np.where(inside, (g - out * proj) / denom, g / denom)
        return (gx,)

    return make_result(out, (x,), backward, "l2_normalize")


__all__ = [
    "linear_projection",
    "layer_norm",
    "sigmoid",
    "gate_sigmoid",
    "silu",
    "gelu",
    "softplus",
    "softmax",
    "conv2d",
    "causal_conv1d",
    "pixel_shuffle",
    "pixel_unshuffle",
    "adaptive_avg_pool_to_1",
    "pad2d",
    "l1_loss",
    "mse_loss",
    "l2_normalize",
    "unbroadcast",
]
