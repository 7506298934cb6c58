"""Shortcut flow matching on the linear noise-to-data path.

A velocity network ``net(h, cond, t, d)`` is trained with two kinds of rows:
plain flow matching at ``d = 0`` and self-consistency rows, where the
prediction for a step of ``2d`` must equal the average of two chained
steps of size ``d`` taken with blocked gradients.  Step sizes are dyadic
multiples of ``1/M`` so the bisection always lands on the grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from .. import rng as rngs
from ..dit.model import masked_mean_square
from ..tensor import Tensor, no_grad


class VelocityNet(Protocol):
    def __call__(self, h, cond, t, d) -> Tensor: ...


@dataclass(frozen=True)
class StepSchedule:
    resolution: int = 128

    def __post_init__(self):
        m = self.resolution
        if m < 1 or m & (m - 1):
            raise ValueError(f"schedule resolution must be a power of two, got {m}")

    @property
    def delta(self) -> float:
        return 1.0 / self.resolution

    def consistency_steps(self) -> np.ndarray:
        """Half-step sizes d usable in self-consistency rows (2d <= 1)."""
        m = self.resolution
        return np.array([2 ** k / m for k in range(int(np.log2(m)))])

    def admissible_steps(self) -> np.ndarray:
        return np.append(self.consistency_steps(), 1.0)

    def check_steps(self, n_steps: int) -> None:
        if n_steps < 1 or n_steps & (n_steps - 1) or n_steps > self.resolution:
            raise ValueError(f"{n_steps} steps is not representable with resolution {self.resolution}")

    def query_d(self, d):
        """Step size handed to the network: the finest level is the instantaneous flow."""
        d = np.asarray(d, dtype=np.float64)
        return np.where(d <= self.delta * (1 + 1e-9), 0.0, d)


def interpolate(h_noise, h_gt, t) -> np.ndarray:
    """(1 - t) * noise + t * data, with ``t`` broadcast per leading sample."""
    h_noise, h_gt = np.asarray(h_noise), np.asarray(h_gt)
    if h_noise.shape != h_gt.shape:
        raise ValueError(f"endpoint shapes differ: {h_noise.shape} vs {h_gt.shape}")
    t = np.asarray(t, dtype=np.float64).reshape(-1, *([1] * (h_gt.ndim - 1)))
    out = (1.0 - t) * h_noise + t * h_gt
    return out.astype(np.result_type(h_noise.dtype, h_gt.dtype), copy=False)


def sample_t_d(schedule: StepSchedule, fraction: float, rng: np.random.Generator, batch: int):
    """Per-row (t, d, is_consistency).  Consistency rows draw a dyadic d
    uniformly over levels, then t uniformly over multiples of d in [0, 1 - 2d]."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"consistency fraction must lie in [0, 1], got {fraction}")
    levels = schedule.consistency_steps()
    is_sc = rng.random(batch) < fraction
    d = levels[rng.integers(0, len(levels), size=batch)]
    slots = np.rint(1.0 / d).astype(np.int64) - 1  # multiples j*d with j <= 1/d - 2
    j = np.floor(rng.random(batch) * slots).astype(np.int64)
    t_sc = j * d
    t_fm = rng.random(batch)
    t = np.where(is_sc, t_sc, t_fm)
    d = np.where(is_sc, d, 0.0)
    return t, d, is_sc


def _call(net: VelocityNet, h, cond, t, d) -> np.ndarray:
    out = net(h, cond, t, d)
    return out.data if isinstance(out, Tensor) else np.asarray(out)


def self_consistency_target(net: VelocityNet, h_t, t, d, cond, schedule: StepSchedule | None = None) -> np.ndarray:
    """Average velocity of two chained steps of size ``d``; no gradient flows."""
    schedule = schedule or StepSchedule()
    h_t = h_t.data if isinstance(h_t, Tensor) else np.asarray(h_t)
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    if np.any(t + 2 * d > 1.0 + 1e-9):
        raise ValueError("self-consistency requires t + 2d <= 1")
    if np.any(d < schedule.delta * (1 - 1e-9)):
        raise ValueError(f"self-consistency requires d >= {schedule.delta}")
    dq = schedule.query_d(d)
    shape = (-1,) + (1,) * (h_t.ndim - 1)
    with no_grad():
        s1 = _call(net, h_t, cond, t, dq)
        h_mid = h_t + d.reshape(shape).astype(h_t.dtype) * s1
        s2 = _call(net, h_mid, cond, t + d, dq)
    return 0.5 * (s1 + s2)


def flow_matching_loss(net: VelocityNet, h_noise, h_gt, t, cond, mask=None) -> Tensor:
    h_t = interpolate(h_noise, h_gt, t)
    pred = net(h_t, cond, t, np.zeros(len(h_t)))
    return masked_mean_square(pred - (np.asarray(h_gt) - np.asarray(h_noise)), mask)


def _rows(x, idx):
    return None if x is None else np.asarray(x)[idx]


def shortcut_loss(
    net: VelocityNet,
    h_noise,
    h_gt,
    cond,
    t,
    d,
    is_sc,
    mask=None,
    schedule: StepSchedule | None = None,
    target_net: VelocityNet | None = None,
) -> tuple[Tensor, dict]:
    """Masked mean squared error over flow-matching and self-consistency rows.

    Flow-matching rows regress ``h_gt - h_noise`` at ``d = 0``;
    self-consistency rows regress the two-step target at ``2d``.
    ``target_net`` (default: ``net`` itself) supplies the blocked target.
    """
    schedule = schedule or StepSchedule()
    h_noise, h_gt = np.asarray(h_noise), np.asarray(h_gt)
    t = np.asarray(t, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    is_sc = np.asarray(is_sc, dtype=bool)
    h_t = interpolate(h_noise, h_gt, t)
    target = h_gt - h_noise
    if is_sc.any():
        idx = np.flatnonzero(is_sc)
        target = target.copy()
        target[idx] = self_consistency_target(
            target_net or net, h_t[idx], t[idx], d[idx], _rows(cond, idx), schedule
        ).astype(target.dtype)
    d_in = np.where(is_sc, schedule.query_d(2 * d), 0.0)
    pred = net(h_t, cond, t, d_in)
    diff = pred - target
    total = masked_mean_square(diff, mask)

    sq = diff.data.astype(np.float64) ** 2
    per_row_count = np.prod(sq.shape[1:])
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64).reshape(-1, 1)
        sq = sq * m
        per_row_count = m.sum() * sq.shape[-1]
    per_row = sq.reshape(len(sq), -1).sum(axis=1) / per_row_count
    parts = {
        "fm_loss": float(per_row[~is_sc].mean()) if (~is_sc).any() else float("nan"),
        "sc_loss": float(per_row[is_sc].mean()) if is_sc.any() else float("nan"),
        "total": total.item(),
        "sc_fraction": float(is_sc.mean()),
    }
    return total, parts


def initial_noise(shape, seed: int, purpose: str = "sample/noise") -> np.ndarray:
    return rngs.stream(seed, purpose).standard_normal(shape)


def _integrate(net: VelocityNet, cond, h: np.ndarray, n_steps: int, step_d: Callable[[float], float]) -> np.ndarray:
    shape = h.shape
    b = shape[0]
    with no_grad():
        for k in range(n_steps):
            t = k / n_steps  # exact k/n, never accumulated
            d = 1.0 / n_steps
            v = _call(net, h, cond, np.full(b, t), np.full(b, step_d(d)))
            h = h + d * v
    return h


def sample(
    net: VelocityNet,
    cond,
    n_steps: int,
    seed: int = 0,
    schedule: StepSchedule | None = None,
    noise: np.ndarray | None = None,
    shape=None,
) -> np.ndarray:
    """Shortcut sampling: ``n_steps`` updates of size ``1/n_steps`` starting from N(0, I)."""
    schedule = schedule or StepSchedule()
    schedule.check_steps(n_steps)
    if noise is None:
        shape = np.shape(cond) if shape is None else shape
        noise = initial_noise(shape, seed)
    return _integrate(net, cond, np.array(noise, copy=True), n_steps, lambda d: float(schedule.query_d(d)))


def euler_oracle(net: VelocityNet, cond, n_steps: int = 512, seed: int = 0, noise: np.ndarray | None = None, shape=None) -> np.ndarray:
    """Many-step Euler integration of the instantaneous (d = 0) field."""
    if noise is None:
        shape = np.shape(cond) if shape is None else shape
        noise = initial_noise(shape, seed)
    return _integrate(net, cond, np.array(noise, copy=True), n_steps, lambda d: 0.0)


def consistency_residual(
    net: VelocityNet,
    h_noise,
    h_gt,
    cond,
    rng: np.random.Generator,
    schedule: StepSchedule | None = None,
    mask=None,
) -> dict:
    """Relative bisection residual E|s(t,2d) - s(t,d)/2 - s(t+d,d)/2|^2 / E|s(t,2d)|^2
    at dyadic (t, d) drawn like self-consistency training rows."""
    schedule = schedule or StepSchedule()
    b = len(h_gt)
    t, d, _ = sample_t_d(schedule, 1.0, rng, b)
    h_t = interpolate(h_noise, h_gt, t)
    with no_grad():
        full = _call(net, h_t, cond, t, schedule.query_d(2 * d))
    halves = self_consistency_target(net, h_t, t, d, cond, schedule)
    w = 1.0 if mask is None else np.asarray(mask, dtype=np.float64).reshape(-1, 1)
    num = float(np.sum(w * (full.astype(np.float64) - halves) ** 2))
    den = float(np.sum(w * full.astype(np.float64) ** 2))
    return {"residual": num, "norm": den, "ratio": num / den if den > 0 else float("nan")}
