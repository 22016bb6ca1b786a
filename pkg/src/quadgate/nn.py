"""Parameterised layers: linear, conv, patch embedding, SRA attention, blocks."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, StateError
from .tensor import Tensor

INIT_STD = 0.02
LN_EPS = 1e-5


class Parameter(Tensor):
    """A leaf tensor owned by a module and updated by the optimiser."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Base class; parameters and submodules are discovered from attributes.

    Attributes holding a :class:`Parameter`, a :class:`Module` or a list of
    modules are traversed in assignment order.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        seen: set[int] = set()
        for name, p in self._walk(prefix):
            if id(p) in seen:
                continue
            seen.add(id(p))
            yield name, p

    def _walk(self, prefix: str) -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            full = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value._walk(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._walk(f"{full}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def _normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(_normal(rng, (out_features, in_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.weight, self.bias, LN_EPS)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: np.random.Generator, stride: int = 1):
        self.weight = Parameter(_normal(rng, (out_channels, in_channels, kernel, kernel)))
        self.bias = Parameter(np.zeros(out_channels))
        self._stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self._stride)


def map_to_tokens(x: Tensor) -> Tensor:
    """(B, C, h, w) -> (B, h*w, C), row-major over the grid."""
    b, c, h, w = x.shape
    return T.transpose(T.reshape(x, (b, c, h * w)), (0, 2, 1))


def tokens_to_map(x: Tensor, hw: tuple[int, int]) -> Tensor:
    b, n, c = x.shape
    h, w = hw
    if n != h * w:
        raise DimensionError(f"{n} tokens cannot fill a {h}x{w} grid")
    return T.reshape(T.transpose(x, (0, 2, 1)), (b, c, h, w))


class PatchEmbed(Module):
    """Non-overlapping P x P patches projected to ``dim`` channels, then normalised."""

    def __init__(self, in_channels: int, dim: int, patch: int, rng: np.random.Generator):
        self.patch_size = patch
        self.proj = Conv2d(in_channels, dim, patch, rng, stride=patch)
        self.norm = LayerNorm(dim)

    def forward(self, x: Tensor) -> tuple[Tensor, tuple[int, int]]:
        h, w = x.shape[-2:]
        p = self.patch_size
        if h % p or w % p:
            raise ConfigurationError(f"input {h}x{w} is not divisible by patch size {p}")
        y = self.proj(x)
        hw = (y.shape[2], y.shape[3])
        return self.norm(map_to_tokens(y)), hw


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, d = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * d))


def scaled_dot_product(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Per-head attention; returns (output, probabilities)."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * scale
    probs = T.softmax(scores)
    return T.matmul(probs, v), probs


def multi_head_attention(x: Tensor, q: Linear, k: Linear, v: Linear, out: Linear, heads: int) -> Tensor:
    """Plain multi-head self-attention over ``x`` of shape (B, n, dim)."""
    ctx, _ = scaled_dot_product(split_heads(q(x), heads), split_heads(k(x), heads), split_heads(v(x), heads))
    return out(merge_heads(ctx))


class Attention(Module):
    """Multi-head attention with spatial reduction of keys and values.

    With ``sr_ratio > 1`` the key/value source is the token grid reduced by an
    r x r stride-r convolution and a layer norm; with ``sr_ratio == 1`` this is
    ordinary multi-head self-attention.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, sr_ratio: int = 1):
        if dim % heads:
            raise ConfigurationError(f"dim {dim} is not divisible by {heads} heads")
        if sr_ratio < 1:
            raise ConfigurationError(f"reduction ratio must be >= 1, got {sr_ratio}")
        self.heads = heads
        self.dim = dim
        self.sr_ratio = sr_ratio
        self.q = Linear(dim, dim, rng)
        # a key bias only shifts each score row by a constant, which softmax ignores
        self.k = Linear(dim, dim, rng, bias=False)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        if sr_ratio > 1:
            self.sr = Conv2d(dim, dim, sr_ratio, rng, stride=sr_ratio)
            self.sr_norm = LayerNorm(dim)
        self._last_probs: np.ndarray | None = None

    def reduce(self, x: Tensor, hw: tuple[int, int] | None) -> Tensor:
        if self.sr_ratio == 1:
            return x
        if hw is None:
            raise ConfigurationError("spatial reduction needs the token grid size")
        h, w = hw
        r = self.sr_ratio
        if h % r or w % r:
            raise ConfigurationError(f"token grid {h}x{w} is not divisible by reduction ratio {r}")
        return self.sr_norm(map_to_tokens(self.sr(tokens_to_map(x, hw))))

    def forward(self, x: Tensor, hw: tuple[int, int] | None = None) -> Tensor:
        if hw is not None and x.shape[1] != hw[0] * hw[1]:
            raise DimensionError(f"{x.shape[1]} tokens do not match grid {hw}")
        if self.sr_ratio == 1:
            q, k, v = self.q(x), self.k(x), self.v(x)
        else:
            kv = self.reduce(x, hw)
            q, k, v = self.q(x), self.k(kv), self.v(kv)
        ctx, probs = scaled_dot_product(split_heads(q, self.heads), split_heads(k, self.heads),
                                        split_heads(v, self.heads))
        self._last_probs = probs.data
        return self.out(merge_heads(ctx))

    @property
    def last_attention(self) -> np.ndarray | None:
        """Attention probabilities (B, heads, n_q, n_kv) of the latest forward."""
        return self._last_probs

    def clear_cache(self) -> None:
        self._last_probs = None


class TransformerBlock(Module):
    """Pre-norm block: ``x + attn(norm(x))`` then ``+ mlp(norm(.))``."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, sr_ratio: int = 1, mlp_ratio: int = 4):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng, sr_ratio)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, dim * mlp_ratio, rng)
        self.fc2 = Linear(dim * mlp_ratio, dim, rng)

    def forward(self, x: Tensor, hw: tuple[int, int] | None = None) -> Tensor:
        y = x + self.attn(self.norm1(x), hw)
        out = y + self.fc2(T.gelu(self.fc1(self.norm2(y))))
        if out.shape != x.shape:
            raise DimensionError(f"block changed token shape {x.shape} -> {out.shape}")
        return out


def cls_attention_map(final_block: TransformerBlock | Attention | np.ndarray) -> np.ndarray:
    """CLS-to-patch attention of a block's latest forward, head-averaged.

    Token 0 must be the CLS token. The CLS-to-CLS entry is dropped and the rest
    renormalised to sum to one. Returns (B, p) for batched probabilities
    (B, heads, n, n) and (p,) for a single (heads, n, n) array.
    """
    if isinstance(final_block, TransformerBlock):
        probs = final_block.attn.last_attention
    elif isinstance(final_block, Attention):
        probs = final_block.last_attention
    else:
        probs = np.asarray(final_block, dtype=np.float64)
    if probs is None:
        raise StateError("no attention probabilities recorded; run a forward pass first")
    single = probs.ndim == 3
    if single:
        probs = probs[None]
    row = probs[:, :, 0, 1:].mean(axis=1)
    att = row / row.sum(axis=-1, keepdims=True)
    return att[0] if single else att
