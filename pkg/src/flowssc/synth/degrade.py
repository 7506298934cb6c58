"""Occlusion-aware degradation producing coarse condition grids.

A fixed virtual camera on the ``y = 0`` face casts a segment to every voxel
centre.  The segment is walked through the grid by splitting it at every
integer plane crossing (a 6-connected traversal).  A voxel is visible when
every voxel strictly before it on that walk is empty.  The walks depend only
on the grid shape and camera, so they are computed once and cached.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .scenes import EMPTY


@dataclass(frozen=True)
class DegradeSpec:
    occluded_dropout: float = 0.3
    occluded_mislabel: float = 0.1
    visible_noise: float = 0.02
    # camera offsets keep rays away from exact voxel corners
    camera: tuple[float, float, float] | None = None

    def __post_init__(self):
        for name in ("occluded_dropout", "occluded_mislabel", "visible_noise"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if self.occluded_dropout + self.occluded_mislabel > 1.0:
            raise ValueError("occluded_dropout + occluded_mislabel must not exceed 1")


def default_camera(dims: tuple[int, int, int]) -> tuple[float, float, float]:
    h, _, d = dims
    return (h / 2 + 0.1234, -0.5, d / 2 + 0.0567)


def camera_for(spec: DegradeSpec, dims) -> tuple[float, float, float]:
    return tuple(spec.camera) if spec.camera is not None else default_camera(tuple(dims))


def trace(camera, target, dims) -> list[tuple[int, int, int]]:
    """Voxels crossed by the segment camera -> target centre, in order, target excluded."""
    cam = np.asarray(camera, dtype=np.float64)
    end = np.asarray(target, dtype=np.float64) + 0.5
    delta = end - cam
    ts = [0.0, 1.0]
    for axis in range(3):
        if delta[axis] == 0.0:
            continue
        lo, hi = sorted((cam[axis], end[axis]))
        for plane in range(int(np.floor(lo)) + 1, int(np.ceil(hi))):
            ts.append((plane - cam[axis]) / delta[axis])
    ts = np.unique(np.clip(ts, 0.0, 1.0))
    mids = 0.5 * (ts[:-1] + ts[1:])
    cells = np.floor(cam + mids[:, None] * delta).astype(np.int64)
    inside = np.all((cells >= 0) & (cells < np.asarray(dims)), axis=1)
    out = []
    tgt = tuple(int(v) for v in target)
    for c in map(tuple, cells[inside]):
        c = tuple(int(v) for v in c)
        if c == tgt:
            break
        if not out or out[-1] != c:
            out.append(c)
    return out


@lru_cache(maxsize=8)
def ray_table(dims: tuple[int, int, int], camera: tuple[float, float, float]) -> np.ndarray:
    """Padded (H*W*D) x L table of flat voxel indices on each voxel's ray (-1 pads)."""
    h, w, d = dims
    paths = []
    for x in range(h):
        for y in range(w):
            for z in range(d):
                cells = trace(camera, (x, y, z), dims)
                paths.append([(cx * w + cy) * d + cz for cx, cy, cz in cells])
    length = max(1, max(len(p) for p in paths))
    table = np.full((len(paths), length), -1, dtype=np.int64)
    for i, p in enumerate(paths):
        table[i, : len(p)] = p
    table.setflags(write=False)
    return table


def visibility(grid: np.ndarray, camera=None) -> np.ndarray:
    """Boolean grid: True where the voxel has a clear line of sight to the camera."""
    dims = tuple(int(s) for s in grid.shape)
    camera = default_camera(dims) if camera is None else tuple(camera)
    table = ray_table(dims, camera)
    occupied = np.append(grid.reshape(-1) != EMPTY, False)  # index -1 -> padding, never occupied
    blocked = occupied[table].any(axis=1)
    return ~blocked.reshape(dims)


def degrade(gt: np.ndarray, spec: DegradeSpec, seed: int, num_classes: int = 5) -> np.ndarray:
    """Coarse version of ``gt``: occluded content dropped or mislabelled, visible
    voxels perturbed at ``spec.visible_noise``."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xDE64]))
    vis = visibility(gt, camera_for(spec, gt.shape))
    coarse = gt.copy()
    u = rng.random(gt.shape)
    shift = rng.integers(1, num_classes, size=gt.shape)  # offset to a different class
    other_semantic = ((gt.astype(np.int64) - 1 + rng.integers(1, max(2, num_classes - 1), size=gt.shape))
                      % max(1, num_classes - 1)) + 1

    hidden = ~vis & (gt != EMPTY)
    drop = hidden & (u < spec.occluded_dropout)
    mislabel = hidden & (u >= spec.occluded_dropout) & (u < spec.occluded_dropout + spec.occluded_mislabel)
    coarse[drop] = EMPTY
    coarse[mislabel] = other_semantic[mislabel].astype(np.uint8)

    noisy = vis & (u < spec.visible_noise)
    coarse[noisy] = ((gt[noisy].astype(np.int64) + shift[noisy]) % num_classes).astype(np.uint8)
    return coarse
