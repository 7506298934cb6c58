"""The eight dihedral symmetries of a square footprint (z-rotations x flip)."""

from __future__ import annotations

import numpy as np

N_VARIANTS = 8


def dihedral(grid: np.ndarray, index: int) -> np.ndarray:
    """Variant ``index``: rotate by ``index % 4`` quarter turns about z, then
    mirror x when ``index >= 4``.  Works on any array whose first two axes
    form the footprint."""
    if grid.shape[0] != grid.shape[1]:
        raise ValueError(f"dihedral augmentation needs a square footprint, got {grid.shape[:2]}")
    if not 0 <= index < N_VARIANTS:
        raise ValueError(f"variant index must be in [0, 8), got {index}")
    out = np.rot90(grid, k=index % 4, axes=(0, 1))
    if index >= 4:
        out = out[::-1]
    return np.ascontiguousarray(out)


def augment_8x(grid: np.ndarray) -> list[np.ndarray]:
    return [dihedral(grid, i) for i in range(N_VARIANTS)]


def compose(a: int, b: int) -> int:
    """Index of ``dihedral(dihedral(g, b), a)``, found by acting on a probe."""
    probe = np.arange(16).reshape(4, 4)
    target = dihedral(dihedral(probe, b), a)
    for i in range(N_VARIANTS):
        if np.array_equal(dihedral(probe, i), target):
            return i
    raise AssertionError("dihedral variants are not closed under composition")
