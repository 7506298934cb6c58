"""Triplane latents.

A triplane holds three axis-aligned feature planes: ``xy`` (H x W x C),
``xz`` (H x D x C) and ``yz`` (W x D x C).  Networks work on the *packed*
form, a ``(P, C)`` array with rows ordered xy, xz, yz, each plane flattened
row-major, where ``P = H*W + H*D + W*D``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PLANES = ("xy", "xz", "yz")


@dataclass(frozen=True)
class TriplaneLayout:
    h: int = 16
    w: int = 16
    d: int = 4
    c: int = 16

    def __post_init__(self):
        if min(self.h, self.w, self.d, self.c) < 1:
            raise ValueError(f"triplane sizes must be positive: {self}")

    @property
    def plane_shapes(self) -> dict[str, tuple[int, int]]:
        return {"xy": (self.h, self.w), "xz": (self.h, self.d), "yz": (self.w, self.d)}

    @property
    def n_tokens(self) -> int:
        return self.h * self.w + self.h * self.d + self.w * self.d

    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for name in PLANES:
            a, b = self.plane_shapes[name]
            out[name] = slice(start, start + a * b)
            start += a * b
        return out

    def cell_centers(self) -> np.ndarray:
        """Normalised 3-D coordinates of each packed row; the axis a plane
        does not span is reported as NaN."""
        rows = []
        for name in PLANES:
            a, b = self.plane_shapes[name]
            ua = (np.arange(a) + 0.5) / a
            ub = (np.arange(b) + 0.5) / b
            ga, gb = np.meshgrid(ua, ub, indexing="ij")
            coords = np.full((a * b, 3), np.nan)
            axes = {"xy": (0, 1), "xz": (0, 2), "yz": (1, 2)}[name]
            coords[:, axes[0]] = ga.reshape(-1)
            coords[:, axes[1]] = gb.reshape(-1)
            rows.append(coords)
        return np.concatenate(rows, axis=0)


@dataclass
class Triplane:
    xy: np.ndarray
    xz: np.ndarray
    yz: np.ndarray

    @property
    def layout(self) -> TriplaneLayout:
        h, w, c = self.xy.shape
        return TriplaneLayout(h, w, self.xz.shape[1], c)

    def pack(self) -> np.ndarray:
        c = self.xy.shape[-1]
        if not (self.xz.shape[-1] == self.yz.shape[-1] == c):
            raise ValueError("all planes must share the channel count")
        return np.concatenate([p.reshape(-1, c) for p in (self.xy, self.xz, self.yz)], axis=0)

    @classmethod
    def unpack(cls, packed: np.ndarray, layout: TriplaneLayout) -> "Triplane":
        packed = np.asarray(packed)
        if packed.shape != (layout.n_tokens, layout.c):
            raise ValueError(f"packed triplane shape {packed.shape} != {(layout.n_tokens, layout.c)}")
        sl, shapes = layout.slices(), layout.plane_shapes
        return cls(**{n: packed[sl[n]].reshape(*shapes[n], layout.c) for n in PLANES})
