"""Parameter containers and the small set of layers shared by the codec and DiT."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import ops
from .core import Tensor, default_dtype


class Parameter(Tensor):
    """A leaf tensor that always requires gradients."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Base container.  Parameters and sub-modules are discovered from attributes
    in assignment order, so parameter naming is stable across runs."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


def variance_scaled(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None, gain: float = 1.0) -> np.ndarray:
    """Glorot-uniform initialisation."""
    limit = gain * math.sqrt(6.0 / (fan_in + fan_out))
    shape = (fan_in, fan_out) if shape is None else shape
    return rng.uniform(-limit, limit, size=shape).astype(default_dtype())


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, bias: bool = True, zero: bool = False):
        w = np.zeros((fan_in, fan_out)) if zero else variance_scaled(rng, fan_in, fan_out)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(fan_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight) if x.ndim >= 2 else ops.matmul(ops.reshape(x, (1, -1)), self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    """LayerNorm with a learnable elementwise affine."""

    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.eps) * self.gamma + self.beta


class MLP(Module):
    def __init__(self, dims: list[int], rng: np.random.Generator, activation=ops.gelu, zero_last: bool = False):
        self.layers = [
            Linear(a, b, rng, zero=zero_last and i == len(dims) - 2)
            for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))
        ]
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self.activation(x)
        return x


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return ops.transpose(ops.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, key_bias: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over B x N x D inputs.

    ``key_bias`` (B x Nk, additive, finite) masks padded keys.
    """
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    scale = 1.0 / math.sqrt(qh.shape[-1])
    scores = ops.matmul(qh, ops.swapaxes(kh, -1, -2)) * scale
    if key_bias is not None:
        scores = scores + key_bias[:, None, None, :].astype(scores.dtype)
    weights = ops.softmax_lastdim(scores)
    return merge_heads(ops.matmul(weights, vh))


class MultiHeadAttention(Module):
    def __init__(self, q_dim: int, kv_dim: int, width: int, out_dim: int, heads: int, rng: np.random.Generator):
        if width % heads:
            raise ValueError(f"attention width {width} not divisible by {heads} heads")
        self.heads = heads
        self.q_proj = Linear(q_dim, width, rng, bias=False)
        self.k_proj = Linear(kv_dim, width, rng, bias=False)
        self.v_proj = Linear(kv_dim, width, rng, bias=False)
        self.out_proj = Linear(width, out_dim, rng)

    def __call__(self, x: Tensor, context: Tensor | None = None, key_bias=None) -> Tensor:
        context = x if context is None else context
        h = attention(self.q_proj(x), self.k_proj(context), self.v_proj(context), self.heads, key_bias)
        return self.out_proj(h)


def fourier_features(x: np.ndarray, frequencies: np.ndarray) -> np.ndarray:
    """sin/cos features of ``x`` (... x A) at angular ``frequencies``; output ... x (A*2*F)
    laid out axis-major: [sin(w x_0), cos(w x_0), sin(w x_1), ...]."""
    x = np.asarray(x, dtype=np.float64)
    ang = x[..., :, None] * frequencies  # ... x A x F
    feats = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    return feats.reshape(*x.shape[:-1], -1)
