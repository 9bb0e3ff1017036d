"""Network-level differentiable ops built on :mod:`crossnav.autodiff.tensor`."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import (
    ShapeError,
    Tensor,
    _make,
    add,
    as_tensor,
    matmul,
    mean,
    mul,
    reshape,
    softmax,
    sub,
    power,
    transpose,
)

MASK_VALUE = -1e9


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input features {x.shape[-1]} do not match weight {weight.shape}")
    out = matmul(x, weight) if x.ndim >= 2 else matmul(reshape(x, (1, -1)), weight)[0]
    return add(out, bias) if bias is not None else out


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input with OIHW weights and zero padding."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if c != ci:
        raise ShapeError(f"conv2d: input has {c} channels but weight {weight.shape} expects {ci}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp} (input {x.shape})")
    s = stride
    ho = (hp - kh) // s + 1
    wo = (wp - kw) // s + 1

    if padding:
        xp = np.zeros((n, c, hp, wp))
        xp[:, :, padding:padding + h, padding:padding + w] = x.data
    else:
        xp = x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, o, 1, 1)
        parents.append(bias)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (g2.T @ cols).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros((n, c, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(np.ascontiguousarray(out), parents, bw, "conv2d")


def _normalize_last(x: np.ndarray, eps: float):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    return xc * inv, inv


def _normalize_backward(gy: np.ndarray, y: np.ndarray, inv: np.ndarray) -> np.ndarray:
    """Gradient through y = (x - mean) / std over the last axis."""
    return inv * (gy - gy.mean(axis=-1, keepdims=True) - y * (gy * y).mean(axis=-1, keepdims=True))


def layer_norm(x, weight, bias, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift (one fused op)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: affine shapes {weight.shape}/{bias.shape} do not match features {x.shape[-1]}")
    y, inv = _normalize_last(x.data, eps)
    wd = weight.data

    def bw(g):
        red = tuple(range(g.ndim - 1))
        return _normalize_backward(g * wd, y, inv), (g * y).sum(axis=red), g.sum(axis=red)

    return _make(y * wd + bias.data, (x, weight, bias), bw, "layer_norm")


def group_norm(x, groups: int, weight, bias, eps: float = 1e-5) -> Tensor:
    """Normalise each group of channels over (channels in group, spatial), then per-channel affine."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    n, c = x.shape[:2]
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    shape = x.shape
    bshape = (1, c) + (1,) * (x.ndim - 2)
    yg, inv = _normalize_last(x.data.reshape(n, groups, -1), eps)
    y = yg.reshape(shape)
    wd = weight.data.reshape(bshape)
    red = (0,) + tuple(range(2, x.ndim))

    def bw(g):
        gy = (g * wd).reshape(n, groups, -1)
        gx = _normalize_backward(gy, yg, inv).reshape(shape)
        return gx, (g * y).sum(axis=red), g.sum(axis=red)

    return _make(y * wd + bias.data.reshape(bshape), (x, weight, bias), bw, "group_norm")


def attention(q, k, v, mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over the last two axes.

    ``mask`` is boolean and broadcastable to the score shape; ``True`` marks
    pairs that may attend. Returns (output, weights).
    """
    d = q.shape[-1]
    scores = mul(matmul(q, transpose(k, _swap_last(k.ndim))), 1.0 / np.sqrt(d))
    if mask is not None:
        scores = add(scores, np.where(mask, 0.0, MASK_VALUE))
    weights = softmax(scores, axis=-1)
    return matmul(weights, v), weights


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def mse(pred, target) -> Tensor:
    diff = sub(pred, target)
    return mean(mul(diff, diff))


def resize_nearest(img: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize of the last two axes to ``size x size`` (input preprocessing)."""
    h, w = img.shape[-2:]
    rows = (np.arange(size) * h // size).astype(np.intp)
    cols = (np.arange(size) * w // size).astype(np.intp)
    return img[..., rows[:, None], cols[None, :]]
