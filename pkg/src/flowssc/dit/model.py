"""Transformer velocity network over triplane tokens.

The noisy and condition triplanes are concatenated channel-wise, each plane
is cut into ``patch x patch`` patches, and all patches form one token
sequence with per-plane learned positional tables.  Blocks are modulated by
the summed (t, d) embedding through AdaLN with zero-initialised gates; the
output head is zero-initialised too, so a fresh network predicts zero.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from ..tensor import Module, Parameter, Tensor, ops
from ..tensor.nn import Linear, MultiHeadAttention, fourier_features
from ..triplane import PLANES, TriplaneLayout


@dataclass(frozen=True)
class DiTConfig:
    layout: TriplaneLayout = field(default_factory=TriplaneLayout)
    patch: int = 2
    embed: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    time_bands: int = 16

    def __post_init__(self):
        if self.embed % self.heads:
            raise ValueError(f"embed dim {self.embed} not divisible by {self.heads} heads")
        for name, (a, b) in self.layout.plane_shapes.items():
            if a % self.patch or b % self.patch:
                raise ValueError(f"plane {name} of size {a}x{b} not divisible by patch {self.patch}")

    @property
    def in_channels(self) -> int:
        return 2 * self.layout.c

    @property
    def plane_tokens(self) -> dict[str, int]:
        return {n: (a // self.patch) * (b // self.patch) for n, (a, b) in self.layout.plane_shapes.items()}

    @property
    def n_tokens(self) -> int:
        return sum(self.plane_tokens.values())

    @property
    def time_features(self) -> int:
        return 2 * self.time_bands

    def structure(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.structure(), sort_keys=True).encode()).digest()


def time_frequencies(bands: int) -> np.ndarray:
    return math.pi * np.geomspace(1.0, 256.0, bands)


def param_count(config: DiTConfig) -> int:
    """Trainable parameter count derived from the configuration alone."""
    e, p2 = config.embed, config.patch ** 2
    hidden = config.mlp_ratio * e
    f = config.time_features
    patch_in = p2 * config.in_channels * e + e
    positions = config.n_tokens * e
    time_mlps = 2 * (f * e + e + e * e + e)
    block = (6 * e * e + 6 * e) + (4 * e * e + e) + (e * hidden + hidden + hidden * e + e)
    final = (2 * e * e + 2 * e) + (e * p2 * config.layout.c + p2 * config.layout.c)
    return patch_in + positions + time_mlps + config.depth * block + final


def valid_mask(config: DiTConfig | TriplaneLayout) -> np.ndarray:
    """Per packed triplane row: True where the position carries content.
    The joint token sequence has no padding, so every row is valid."""
    layout = config.layout if isinstance(config, DiTConfig) else config
    return np.ones(layout.n_tokens, dtype=bool)


@dataclass(frozen=True)
class ComposedLayout:
    """The three planes packed into one rectangle: xy top-left, xz to its
    right, yz (transposed) below xy.  The bottom-right corner is unused."""

    layout: TriplaneLayout

    @property
    def shape(self) -> tuple[int, int]:
        lay = self.layout
        return lay.h + lay.d, lay.w + lay.d

    def mask(self) -> np.ndarray:
        lay = self.layout
        m = np.ones(self.shape, dtype=bool)
        m[lay.h:, lay.w:] = False
        return m

    def compose(self, packed: np.ndarray) -> np.ndarray:
        lay = self.layout
        sl = lay.slices()
        canvas = np.zeros((*self.shape, packed.shape[-1]), dtype=packed.dtype)
        canvas[:lay.h, :lay.w] = packed[sl["xy"]].reshape(lay.h, lay.w, -1)
        canvas[:lay.h, lay.w:] = packed[sl["xz"]].reshape(lay.h, lay.d, -1)
        canvas[lay.h:, :lay.w] = packed[sl["yz"]].reshape(lay.w, lay.d, -1).transpose(1, 0, 2)
        return canvas

    def decompose(self, canvas: np.ndarray) -> np.ndarray:
        lay = self.layout
        c = canvas.shape[-1]
        return np.concatenate([
            canvas[:lay.h, :lay.w].reshape(-1, c),
            canvas[:lay.h, lay.w:].reshape(-1, c),
            canvas[lay.h:, :lay.w].transpose(1, 0, 2).reshape(-1, c),
        ])


def masked_mean_square(diff: Tensor, mask: np.ndarray | None) -> Tensor:
    """Mean of squared entries over valid rows of a B x P x C difference."""
    sq = diff * diff
    if mask is None:
        return ops.mean(sq)
    m = np.asarray(mask, dtype=sq.dtype).reshape(-1, 1)
    count = float(m.sum()) * sq.shape[0] * sq.shape[-1]
    if count == 0:
        raise ValueError("mask excludes every position")
    return ops.sum(sq * m) * (1.0 / count)


def patchify(packed: Tensor, layout: TriplaneLayout, patch: int) -> Tensor:
    """B x P x C packed planes -> B x T x (patch*patch*C) patch vectors."""
    b, _, c = packed.shape
    sl, pieces = layout.slices(), []
    for name in PLANES:
        a, w = layout.plane_shapes[name]
        if a % patch or w % patch:
            raise ValueError(f"plane {name} of size {a}x{w} not divisible by patch {patch}")
        x = ops.reshape(packed[:, sl[name], :], (b, a // patch, patch, w // patch, patch, c))
        x = ops.transpose(x, (0, 1, 3, 2, 4, 5))
        pieces.append(ops.reshape(x, (b, (a // patch) * (w // patch), patch * patch * c)))
    return ops.concat(pieces, axis=1)


def unpatchify(tokens: Tensor, layout: TriplaneLayout, patch: int) -> Tensor:
    """Inverse of :func:`patchify`."""
    b, _, pc = tokens.shape
    c = pc // (patch * patch)
    start, pieces = 0, []
    for name in PLANES:
        a, w = layout.plane_shapes[name]
        n = (a // patch) * (w // patch)
        x = ops.reshape(tokens[:, start:start + n, :], (b, a // patch, w // patch, patch, patch, c))
        x = ops.transpose(x, (0, 1, 3, 2, 4, 5))
        pieces.append(ops.reshape(x, (b, a * w, c)))
        start += n
    return ops.concat(pieces, axis=1)


def _as_batch(v, b: int) -> np.ndarray:
    arr = np.broadcast_to(np.asarray(v, dtype=np.float64).reshape(-1), (b,))
    return arr.reshape(b, 1)


class TimeStepEmbedding(Module):
    """Fourier features of t and d, separate SiLU MLPs, summed."""

    def __init__(self, config: DiTConfig, rng: np.random.Generator):
        e, f = config.embed, config.time_features
        self.freqs = time_frequencies(config.time_bands)
        self.t_in = Linear(f, e, rng)
        self.t_out = Linear(e, e, rng)
        self.d_in = Linear(f, e, rng)
        self.d_out = Linear(e, e, rng)

    def __call__(self, t, d) -> Tensor:
        t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
        d = np.asarray(d, dtype=np.float64).reshape(-1, 1)
        ft = Tensor(fourier_features(t, self.freqs))
        fd = Tensor(fourier_features(d, self.freqs))
        et = self.t_out(ops.silu(self.t_in(ft)))
        ed = self.d_out(ops.silu(self.d_in(fd)))
        return et + ed


def adaln_modulate(z: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    """LayerNorm(z) * (1 + scale) + shift with per-sample B x E modulation."""
    b, e = shift.shape
    shift = ops.reshape(shift, (b, 1, e))
    scale = ops.reshape(scale, (b, 1, e))
    return ops.layer_norm(z, 1e-6) * (scale + 1.0) + shift


class DiTBlock(Module):
    def __init__(self, config: DiTConfig, rng: np.random.Generator):
        e = config.embed
        self.adaln = Linear(e, 6 * e, rng, zero=True)
        self.attn = MultiHeadAttention(e, e, e, e, config.heads, rng)
        self.fc1 = Linear(e, config.mlp_ratio * e, rng)
        self.fc2 = Linear(config.mlp_ratio * e, e, rng)
        self.embed = e

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        b, e = x.shape[0], self.embed
        mod = self.adaln(ops.silu(cond))
        shift1, scale1, gate1, shift2, scale2, gate2 = (mod[:, i * e:(i + 1) * e] for i in range(6))
        h = self.attn(adaln_modulate(x, shift1, scale1))
        x = x + ops.reshape(gate1, (b, 1, e)) * h
        h = self.fc2(ops.gelu(self.fc1(adaln_modulate(x, shift2, scale2))))
        return x + ops.reshape(gate2, (b, 1, e)) * h


class DiT(Module):
    """Velocity network s(h_t, t, d | h_coarse) on packed B x P x C triplanes."""

    def __init__(self, config: DiTConfig, rng: np.random.Generator):
        self.config = config
        e, p2 = config.embed, config.patch ** 2
        self.patch_in = Linear(p2 * config.in_channels, e, rng)
        self.positions = [
            Parameter(rng.normal(scale=0.02, size=(config.plane_tokens[n], e))) for n in PLANES
        ]
        self.time = TimeStepEmbedding(config, rng)
        self.blocks = [DiTBlock(config, rng) for _ in range(config.depth)]
        self.final_adaln = Linear(e, 2 * e, rng, zero=True)
        self.head = Linear(e, p2 * config.layout.c, rng, zero=True)
        self.mask = valid_mask(config)
        self.calls = 0
        self.evaluations = 0  # per-sample forward passes

    def __call__(self, h_t, cond, t, d) -> Tensor:
        cfg = self.config
        h_t = h_t if isinstance(h_t, Tensor) else Tensor(h_t)
        cond = cond if isinstance(cond, Tensor) else Tensor(cond)
        expected = (cfg.layout.n_tokens, cfg.layout.c)
        if h_t.shape[1:] != expected or cond.shape != h_t.shape:
            raise ValueError(f"expected two B x {expected[0]} x {expected[1]} triplanes, got {h_t.shape} and {cond.shape}")
        self.calls += 1
        self.evaluations += h_t.shape[0]
        b, e = h_t.shape[0], cfg.embed
        x = self.patch_in(patchify(ops.concat([h_t, cond], axis=2), cfg.layout, cfg.patch))
        x = x + ops.concat(self.positions, axis=0)
        c = self.time(_as_batch(t, b), _as_batch(d, b))
        for block in self.blocks:
            x = block(x, c)
        mod = self.final_adaln(ops.silu(c))
        x = adaln_modulate(x, mod[:, :e], mod[:, e:])
        out = unpatchify(self.head(x), cfg.layout, cfg.patch)
        if not self.mask.all():
            out = out * self.mask.astype(out.dtype).reshape(-1, 1)
        return out
