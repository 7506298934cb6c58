"""Procedural semantic voxel scenes.

Grids are ``uint8`` arrays indexed ``[x, y, z]`` with ``z`` pointing up.  The
virtual camera used by :mod:`flowssc.synth.degrade` sits on the ``y = 0``
face, so "behind" means larger ``y``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EMPTY, GROUND, BUILDING, VEHICLE, VEGETATION = 0, 1, 2, 3, 4
CLASS_NAMES = ("empty", "ground", "building", "vehicle", "vegetation")


@dataclass(frozen=True)
class SceneSpec:
    dims: tuple[int, int, int] = (32, 32, 8)
    num_classes: int = 5
    buildings: tuple[int, int] = (1, 2)
    vehicles: tuple[int, int] = (1, 3)
    blobs: tuple[int, int] = (1, 4)
    wall_behind_blob: float = 0.7
    raised_ground: float = 0.5

    def __post_init__(self):
        if self.num_classes != len(CLASS_NAMES):
            raise ValueError(f"the scene palette has {len(CLASS_NAMES)} classes")
        if min(self.dims) < 4:
            raise ValueError("scene dims must be at least 4 along every axis")


def _box(grid, x0, x1, y0, y1, z0, z1, label):
    h, w, d = grid.shape
    x0, x1 = max(0, x0), min(h, x1)
    y0, y1 = max(0, y0), min(w, y1)
    z0, z1 = max(0, z0), min(d, z1)
    if x0 < x1 and y0 < y1 and z0 < z1:
        grid[x0:x1, y0:y1, z0:z1] = label


def generate_scene(spec: SceneSpec, seed: int) -> np.ndarray:
    """Deterministic scene for ``seed``: ground, buildings, vehicles, vegetation.

    A wall is placed behind each vegetation blob with probability
    ``spec.wall_behind_blob``, which gives the refiner a layout rule to learn.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5CE4E]))
    h, w, d = spec.dims
    grid = np.zeros(spec.dims, dtype=np.uint8)
    grid[:, :, 0] = GROUND

    if rng.random() < spec.raised_ground:
        # kerb strip along one side
        width = int(rng.integers(2, 5))
        if rng.random() < 0.5:
            _box(grid, 0, h, 0, width, 1, 2, GROUND)
        else:
            _box(grid, 0, width, 0, w, 1, 2, GROUND)

    top = min(d, 8)
    for _ in range(int(rng.integers(spec.buildings[0], spec.buildings[1] + 1))):
        length = int(rng.integers(h // 5, h // 2 + 1))
        depth = int(rng.integers(3, 7))
        height = int(rng.integers(max(2, d // 2), top + 1))
        x0 = int(rng.integers(0, h - length + 1))
        y0 = int(rng.integers(int(w * 0.7), w - depth + 1))
        _box(grid, x0, x0 + length, y0, y0 + depth, 1, height, BUILDING)

    for _ in range(int(rng.integers(spec.vehicles[0], spec.vehicles[1] + 1))):
        long_axis_x = rng.random() < 0.5
        lx, ly = (int(rng.integers(5, 8)), int(rng.integers(3, 5)))
        if not long_axis_x:
            lx, ly = ly, lx
        x0 = int(rng.integers(0, h - lx + 1))
        y0 = int(rng.integers(2, int(w * 0.65) - ly + 1))
        _box(grid, x0, x0 + lx, y0, y0 + ly, 1, 3, VEHICLE)

    xs, ys, zs = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, np.arange(d) + 0.5, indexing="ij")
    for _ in range(int(rng.integers(spec.blobs[0], spec.blobs[1] + 1))):
        cx = rng.uniform(3, h - 3)
        cy = rng.uniform(w * 0.3, w * 0.7)
        rx, ry = rng.uniform(2.0, 4.5), rng.uniform(1.8, 3.5)
        rz = rng.uniform(1.8, min(3.5, d / 2))
        cz = 1.0 + rz * rng.uniform(0.6, 1.0)
        inside = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 + ((zs - cz) / rz) ** 2 <= 1.0
        inside[:, :, 0] = False
        grid[inside] = VEGETATION
        if rng.random() < spec.wall_behind_blob:
            y0 = int(np.ceil(cy + ry)) + 1
            thick = int(rng.integers(1, 3))
            height = int(rng.integers(max(2, d // 2), top + 1))
            wall = np.zeros_like(inside)
            _box(wall, int(cx - rx) - 1, int(np.ceil(cx + rx)) + 1, y0, y0 + thick, 1, height, True)
            grid[wall & (grid == EMPTY)] = BUILDING
    return grid


def class_census(grids: np.ndarray, num_classes: int) -> np.ndarray:
    """Fraction of voxels per class over a stack of grids."""
    counts = np.bincount(np.asarray(grids).reshape(-1), minlength=num_classes)
    return counts / counts.sum()
