"""Voxel <-> triplane autoencoders.

:class:`TriplaneCodec` pairs an encoder (cross-attention over voxel tokens,
or the strided-convolution baseline) with the shared triplane decoder.
Latents are handled in packed ``(B, P, C)`` form (see :mod:`flowssc.triplane`).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from ..tensor import Module, Parameter, Tensor, ops
from ..tensor.nn import MLP, LayerNorm, Linear, MultiHeadAttention, fourier_features, variance_scaled
from ..triplane import PLANES, TriplaneLayout

PAD_BIAS = -1e9


@dataclass(frozen=True)
class CodecConfig:
    dims: tuple[int, int, int] = (32, 32, 8)
    num_classes: int = 5
    layout: TriplaneLayout = field(default_factory=TriplaneLayout)
    kind: str = "xattn"  # "xattn" or "conv"
    fourier_bands: int = 8
    heads: int = 4
    width: int = 64
    self_attn_layers: int = 2
    key_scale: float = 3.0
    decoder_hidden: int = 64
    conv_hidden: int = 32

    def __post_init__(self):
        if self.kind not in ("xattn", "conv"):
            raise ValueError(f"unknown codec kind {self.kind!r}")
        if self.layout.c % self.heads or self.width % self.heads:
            raise ValueError(f"head count {self.heads} must divide C={self.layout.c} and width={self.width}")

    @property
    def fourier_dim(self) -> int:
        return 3 * 2 * self.fourier_bands

    def structure(self) -> dict:
        out = dataclasses.asdict(self)
        out["dims"] = list(self.dims)
        return out

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.structure(), sort_keys=True).encode()).digest()


def axis_frequencies(dims: tuple[int, int, int], bands: int) -> list[np.ndarray]:
    """Log-spaced angular frequencies per axis, from pi/2 up to the axis' voxel Nyquist pi*n/2."""
    return [np.geomspace(math.pi / 2, math.pi * n / 2, bands) for n in dims]


def encode_positions(points: np.ndarray, freqs: list[np.ndarray]) -> np.ndarray:
    """Fourier features of N x 3 normalised points; NaN coordinates give zero slots."""
    parts = []
    for axis, w in enumerate(freqs):
        col = points[:, axis:axis + 1]
        feats = fourier_features(np.nan_to_num(col), w)
        feats[np.isnan(col[:, 0])] = 0.0
        parts.append(feats)
    return np.concatenate(parts, axis=1)


def voxel_centers(dims: tuple[int, int, int]) -> np.ndarray:
    """Normalised centres of all voxels in row-major (x, y, z) order."""
    idx = np.indices(dims).reshape(3, -1).T
    return (idx + 0.5) / np.asarray(dims, dtype=np.float64)


@dataclass
class TokenSet:
    positions: np.ndarray  # N x 3 in [0, 1]
    labels: np.ndarray  # N class ids (all non-empty)
    features: np.ndarray | None = None  # N x C_in, filled by voxelize_tokens

    def __len__(self) -> int:
        return len(self.labels)

    def canonical(self) -> "TokenSet":
        order = np.lexsort(self.positions.T[::-1])
        feats = None if self.features is None else self.features[order]
        return TokenSet(self.positions[order], self.labels[order], feats)


def grid_tokens(grid: np.ndarray) -> TokenSet:
    idx = np.argwhere(grid != 0)
    if len(idx) == 0:
        raise ValueError("cannot tokenize an all-empty grid")
    pos = (idx + 0.5) / np.asarray(grid.shape, dtype=np.float64)
    return TokenSet(pos, grid[tuple(idx.T)].astype(np.int64))


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------

class _SelfAttentionBlock(Module):
    def __init__(self, width: int, heads: int, rng):
        self.norm1 = LayerNorm(width)
        self.attn = MultiHeadAttention(width, width, width, width, heads, rng)
        self.norm2 = LayerNorm(width)
        self.mlp = MLP([width, 2 * width, width], rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class CrossAttentionEncoder(Module):
    """Learnable triplane queries attend over the set of occupied-voxel tokens.

    Queries start as 2-D Fourier encodings of their plane cell centres laid
    out in the same axis slots as the tokens' 3-D encodings; the key and
    query projections start as scaled identities on those slots, so each
    query initially attends to the voxels that project onto its cell.
    """

    def __init__(self, config: CodecConfig, rng: np.random.Generator):
        self.config = config
        f, heads, width = config.fourier_dim, config.heads, config.width
        self.freqs = axis_frequencies(config.dims, config.fourier_bands)
        query_init = encode_positions(config.layout.cell_centers(), self.freqs)
        self.queries = Parameter(query_init)
        self.class_embed = Parameter(rng.normal(scale=0.5, size=(config.num_classes, f)))
        eye = np.tile(np.eye(f), (1, heads)) * config.key_scale
        self.w_query = Parameter(eye + rng.normal(scale=0.02, size=(f, f * heads)))
        w_key = np.concatenate([rng.normal(scale=0.02, size=(f, f * heads)), eye], axis=0)
        self.w_key = Parameter(w_key)
        self.token_in = Linear(2 * f, width, rng)
        self.token_mlp = MLP([width, 2 * width, width], rng)
        self.w_value = Linear(width, width, rng, bias=False)
        self.query_in = Linear(f, width, rng)
        self.cross_out = Linear(width, width, rng)
        self.blocks = [_SelfAttentionBlock(width, heads, rng) for _ in range(config.self_attn_layers)]
        self.norm_out = LayerNorm(width)
        self.head = Linear(width, config.layout.c, rng)

    def token_features(self, tokens: TokenSet) -> Tensor:
        """Class embedding concatenated with the Fourier position encoding."""
        emb = ops.take_rows(self.class_embed, tokens.labels)
        pos = Tensor(encode_positions(tokens.positions, self.freqs))
        return ops.concat([emb, pos], axis=1)

    def __call__(self, token_sets: list[TokenSet]) -> Tensor:
        cfg = self.config
        heads, f = cfg.heads, cfg.fourier_dim
        token_sets = [t.canonical() for t in token_sets]
        b = len(token_sets)
        n_max = max(len(t) for t in token_sets)
        feats, bias = [], np.zeros((b, n_max))
        for i, t in enumerate(token_sets):
            x = self.token_features(t)
            if len(t) < n_max:
                x = ops.concat([x, Tensor(np.zeros((n_max - len(t), 2 * f)))], axis=0)
                bias[i, len(t):] = PAD_BIAS
            feats.append(ops.reshape(x, (1, n_max, 2 * f)))
        v_emb = ops.concat(feats, axis=0) if b > 1 else feats[0]

        keys = ops.matmul(v_emb, self.w_key)  # B x N x heads*f
        tok = self.token_in(v_emb)
        tok = tok + self.token_mlp(tok)
        values = self.w_value(tok)
        q = ops.matmul(self.queries, self.w_query)  # P x heads*f
        p = q.shape[0]
        qh = ops.transpose(ops.reshape(q, (1, p, heads, f)), (0, 2, 1, 3))
        kh = ops.transpose(ops.reshape(keys, (b, n_max, heads, f)), (0, 2, 3, 1))
        vh = ops.transpose(ops.reshape(values, (b, n_max, heads, cfg.width // heads)), (0, 2, 1, 3))
        scores = ops.matmul(qh, kh) * (1.0 / math.sqrt(f))
        scores = scores + bias[:, None, None, :].astype(scores.dtype)
        attn = ops.matmul(ops.softmax_lastdim(scores), vh)  # B x heads x P x dv
        h = ops.reshape(ops.transpose(attn, (0, 2, 1, 3)), (b, p, cfg.width))
        h = self.query_in(self.queries) + self.cross_out(h)
        for block in self.blocks:
            h = block(h)
        return ops.layer_norm(self.head(self.norm_out(h)))


class ConvEncoder(Module):
    """Baseline: strided 3-D convolutions over the dense one-hot grid, then
    mean-pooling along each axis to form the three planes."""

    def __init__(self, config: CodecConfig, rng: np.random.Generator):
        self.config = config
        k, hid = config.num_classes, config.conv_hidden
        gx, gy, gz = config.dims
        lay = config.layout
        if (gx % lay.h, gy % lay.w, gz % lay.d) != (0, 0, 0):
            raise ValueError("conv baseline needs grid dims divisible by triplane dims")
        self.stride = gx // lay.h
        if (gy // lay.w, gz // lay.d) != (self.stride, self.stride):
            raise ValueError("conv baseline needs one common downsampling factor")
        self.w1 = Parameter(variance_scaled(rng, 27 * k, hid, shape=(3, 3, 3, k, hid)))
        self.b1 = Parameter(np.zeros(hid))
        self.w2 = Parameter(variance_scaled(rng, 27 * hid, hid, shape=(3, 3, 3, hid, hid)))
        self.b2 = Parameter(np.zeros(hid))
        self.w3 = Parameter(variance_scaled(rng, 27 * hid, hid, shape=(3, 3, 3, hid, hid)))
        self.b3 = Parameter(np.zeros(hid))
        self.head = Linear(hid, lay.c, rng)

    def __call__(self, grids: np.ndarray) -> Tensor:
        grids = np.asarray(grids)
        onehot = np.eye(self.config.num_classes)[grids]
        x = ops.gelu(ops.conv3d(Tensor(onehot), self.w1, self.b1, stride=1))
        x = ops.gelu(ops.conv3d(x, self.w2, self.b2, stride=self.stride))
        x = ops.gelu(ops.conv3d(x, self.w3, self.b3, stride=1))
        b, hx, hy, hz, c = x.shape
        xy = ops.reshape(ops.mean(x, axis=3), (b, hx * hy, c))
        xz = ops.reshape(ops.mean(x, axis=2), (b, hx * hz, c))
        yz = ops.reshape(ops.mean(x, axis=1), (b, hy * hz, c))
        h = ops.concat([xy, xz, yz], axis=1)
        return ops.layer_norm(self.head(h))


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------

_PLANE_AXES = {"xy": (0, 1), "xz": (0, 2), "yz": (1, 2)}


class TriplaneDecoder(Module):
    """Sum of bilinear plane samples -> residual 3-D conv refinement -> point MLP.

    The second convolution starts at zero, so at initialisation the dense
    path equals point-wise decoding.
    """

    def __init__(self, config: CodecConfig, rng: np.random.Generator):
        self.config = config
        c, hid = config.layout.c, config.conv_hidden
        self.conv1 = Parameter(variance_scaled(rng, 27 * c, hid, shape=(3, 3, 3, c, hid)))
        self.conv1_b = Parameter(np.zeros(hid))
        self.conv2 = Parameter(np.zeros((3, 3, 3, hid, c)))
        self.conv2_b = Parameter(np.zeros(c))
        self.mlp = MLP([c, config.decoder_hidden, config.decoder_hidden, config.num_classes], rng)
        self._grid_mats = self._sampling_matrices(voxel_centers(config.dims))

    def _sampling_matrices(self, points: np.ndarray) -> dict:
        lay = self.config.layout
        return {
            name: ops.bilinear_matrix(points[:, list(_PLANE_AXES[name])], *lay.plane_shapes[name])
            for name in PLANES
        }

    def plane_features(self, latents: Tensor, mats: dict) -> Tensor:
        """Summed plane samples, B x N x C."""
        lay = self.config.layout
        b = latents.shape[0]
        sl = lay.slices()
        total = None
        for name in PLANES:
            a, c2 = lay.plane_shapes[name]
            plane = ops.reshape(latents[:, sl[name], :], (b, a, c2, lay.c))
            sample = ops.bilinear_sample_2d(plane, mats[name])
            total = sample if total is None else total + sample
        return total

    def decode_grid(self, latents: Tensor, dims: tuple[int, int, int] | None = None) -> Tensor:
        if dims is not None and tuple(dims) != tuple(self.config.dims):
            raise ValueError(f"decoder configured for dims {self.config.dims}, asked for {tuple(dims)}")
        latents = latents if isinstance(latents, Tensor) else Tensor(latents)
        b = latents.shape[0]
        feats = ops.reshape(self.plane_features(latents, self._grid_mats), (b, *self.config.dims, self.config.layout.c))
        hidden = ops.gelu(ops.conv3d(feats, self.conv1, self.conv1_b))
        feats = feats + ops.conv3d(hidden, self.conv2, self.conv2_b)
        return self.mlp(feats)

    def decode_points(self, latents: Tensor, points: np.ndarray) -> Tensor:
        """Point-wise logits (B x N x K) without the convolutional refinement."""
        latents = latents if isinstance(latents, Tensor) else Tensor(latents)
        mats = self._sampling_matrices(np.clip(np.asarray(points, dtype=np.float64), 0.0, 1.0))
        return self.mlp(self.plane_features(latents, mats))


class TriplaneCodec(Module):
    def __init__(self, config: CodecConfig, rng: np.random.Generator):
        self.config = config
        self.encoder = CrossAttentionEncoder(config, rng) if config.kind == "xattn" else ConvEncoder(config, rng)
        self.decoder = TriplaneDecoder(config, rng)

    def encode(self, grids) -> Tensor:
        """Packed latents (B x P x C) for a batch of label grids."""
        grids = [np.asarray(g) for g in grids]
        if self.config.kind == "conv":
            return self.encoder(np.stack(grids))
        return self.encoder([grid_tokens(g) for g in grids])

    def encode_tokens(self, token_sets: list[TokenSet]) -> Tensor:
        if self.config.kind != "xattn":
            raise TypeError("the convolutional baseline consumes dense grids, not token sets")
        return self.encoder(token_sets)

    def decode_grid(self, latents: Tensor, dims=None) -> Tensor:
        return self.decoder.decode_grid(latents, dims)

    def decode_point(self, latent, x) -> np.ndarray:
        """Logits (length K) at one normalised point for a single packed latent."""
        lat = latent if isinstance(latent, Tensor) else Tensor(latent)
        if lat.ndim == 2:
            lat = ops.reshape(lat, (1, *lat.shape))
        return self.decoder.decode_points(lat, np.asarray(x, dtype=np.float64).reshape(1, 3)).data[0, 0]


def voxelize_tokens(grid: np.ndarray, codec: TriplaneCodec) -> TokenSet:
    """One token per occupied voxel with its current input features."""
    tokens = grid_tokens(grid)
    if isinstance(codec.encoder, CrossAttentionEncoder):
        tokens.features = codec.encoder.token_features(tokens).data
    return tokens
