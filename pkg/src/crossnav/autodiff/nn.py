"""Parameterised layers. Parameters are leaf :class:`Tensor` objects with ``requires_grad``."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, add, relu, reshape, transpose


def orthogonal(rng: np.random.Generator, shape: tuple[int, int], gain: float = 1.0) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


class Module:
    """Container that discovers parameters and sub-modules from its attributes."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        seen: set[int] = set()
        for name, p in self._walk(prefix):
            if id(p) not in seen:
                seen.add(id(p))
                yield name, p

    def _walk(self, prefix: str):
        for key, val in vars(self).items():
            full = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield full, val
            elif isinstance(val, Module):
                yield from val._walk(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item._walk(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            if missing:
                raise KeyError(f"missing parameters: {missing[:5]}{'...' if len(missing) > 5 else ''}")
        for k, p in own.items():
            if k not in state:
                continue
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"parameter {k}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, gain: float = np.sqrt(2.0),
                 zero: bool = False):
        self.n_in, self.n_out = n_in, n_out
        w = np.zeros((n_in, n_out)) if zero else orthogonal(rng, (n_in, n_out), gain)
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(n_out))

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, stride: int = 1,
                 padding: int = 0):
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        self.stride, self.padding = stride, padding
        fan_in = c_in * kernel * kernel
        self.weight = parameter(rng.standard_normal((c_out, c_in, kernel, kernel)) * np.sqrt(2.0 / fan_in))
        self.bias = parameter(np.zeros(c_out))

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int, eps: float = 1e-5):
        self.groups, self.eps = groups, eps
        self.weight = parameter(np.ones(channels))
        self.bias = parameter(np.zeros(channels))

    def forward(self, x):
        return F.group_norm(x, self.groups, self.weight, self.bias, self.eps)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.weight = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))

    def forward(self, x):
        return F.layer_norm(x, self.weight, self.bias, self.eps)


def _groups_for(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0 and channels >= 2 * g:
            return g
    return 1


class ResidualBlock(Module):
    """conv3x3-GN-ReLU-conv3x3-GN plus a (projected) shortcut, then ReLU."""

    def __init__(self, c_in: int, c_out: int, stride: int, rng: np.random.Generator):
        self.conv1 = Conv2d(c_in, c_out, 3, rng, stride=stride, padding=1)
        self.norm1 = GroupNorm(_groups_for(c_out), c_out)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, stride=1, padding=1)
        self.norm2 = GroupNorm(_groups_for(c_out), c_out)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = Conv2d(c_in, c_out, 1, rng, stride=stride, padding=0)

    def forward(self, x):
        h = relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        skip = self.shortcut(x) if self.shortcut is not None else x
        return relu(add(h, skip))

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        return self.conv1.output_hw(h, w)


class ResNetStack(Module):
    """Stem conv 7x7 + GN + ReLU followed by stages of residual blocks."""

    def __init__(self, c_in: int, stem: int, stages: list[tuple[int, int]], blocks_per_stage: int,
                 rng: np.random.Generator, stem_kernel: int = 7):
        self.stem = Conv2d(c_in, stem, stem_kernel, rng, stride=1, padding=stem_kernel // 2)
        self.stem_norm = GroupNorm(_groups_for(stem), stem)
        blocks = []
        c = stem
        for c_out, stride in stages:
            for b in range(blocks_per_stage):
                blocks.append(ResidualBlock(c, c_out, stride if b == 0 else 1, rng))
                c = c_out
        self.blocks = blocks
        self.out_channels = c

    def forward(self, x):
        h = relu(self.stem_norm(self.stem(x)))
        for blk in self.blocks:
            h = blk(h)
        return h

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        h, w = self.stem.output_hw(h, w)
        for blk in self.blocks:
            h, w = blk.output_hw(h, w)
        return h, w


class MLP(Module):
    def __init__(self, sizes: list[int], rng: np.random.Generator, out_gain: float = np.sqrt(2.0),
                 zero_last: bool = False):
        layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            layers.append(Linear(a, b, rng, gain=out_gain if last else np.sqrt(2.0), zero=last and zero_last))
        self.layers = layers

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"attention dim {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.q = Linear(dim, dim, rng, gain=1.0)
        self.k = Linear(dim, dim, rng, gain=1.0)
        self.v = Linear(dim, dim, rng, gain=1.0)
        self.out = Linear(dim, dim, rng, gain=1.0)
        self.last_weights: np.ndarray | None = None

    def _split(self, x):
        b, s, _ = x.shape
        return transpose(reshape(x, (b, s, self.heads, self.dim // self.heads)), (0, 2, 1, 3))

    def forward(self, query, key, value, mask: np.ndarray | None = None):
        """``mask``: boolean (B, Sq, Sk) or broadcastable; True = may attend."""
        q, k, v = self._split(self.q(query)), self._split(self.k(key)), self._split(self.v(value))
        if mask is not None and mask.ndim == 3:
            mask = mask[:, None, :, :]
        ctx, w = F.attention(q, k, v, mask)
        self.last_weights = w.data
        b, _, s, _ = ctx.shape
        ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (b, s, self.dim))
        return self.out(ctx)


class TransformerEncoderLayer(Module):
    """Post-norm encoder layer: self-attention and a ReLU feed-forward block."""

    def __init__(self, dim: int, heads: int, ff_dim: int, rng: np.random.Generator):
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm1 = LayerNorm(dim)
        self.ff = MLP([dim, ff_dim, dim], rng, out_gain=1.0)
        self.norm2 = LayerNorm(dim)

    def forward(self, x, mask=None):
        x = self.norm1(add(x, self.attn(x, x, x, mask)))
        return self.norm2(add(x, self.ff(x)))


class TransformerDecoderLayer(Module):
    """Post-norm decoder layer: masked self-attention, cross-attention, feed-forward."""

    def __init__(self, dim: int, heads: int, ff_dim: int, rng: np.random.Generator):
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.norm1 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ff = MLP([dim, ff_dim, dim], rng, out_gain=1.0)
        self.norm3 = LayerNorm(dim)

    def forward(self, x, memory, self_mask=None, cross_mask=None):
        x = self.norm1(add(x, self.self_attn(x, x, x, self_mask)))
        x = self.norm2(add(x, self.cross_attn(x, memory, memory, cross_mask)))
        return self.norm3(add(x, self.ff(x)))

