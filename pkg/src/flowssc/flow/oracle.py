"""Closed-form checks for the flow machinery.

``gaussian_oracle_check`` fits a regressor that is linear in ``x`` with
smooth time-dependent coefficients, which is exactly the family of optimal
velocities between two isotropic Gaussians, and compares it to the
closed form.  The 2-D toy task trains a small shortcut MLP and compares
one-step samples to a fine Euler integration of its own instantaneous field.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import legendre

from .. import rng as rngs
from ..tensor import AdamW, Module, Parameter, Tensor, WarmupCosine, backward, no_grad, ops
from ..tensor.nn import MLP, fourier_features
from .shortcut import StepSchedule, euler_oracle, sample, sample_t_d, shortcut_loss


def gaussian_velocity(x: np.ndarray, t: np.ndarray, mu: np.ndarray, sigma: float) -> np.ndarray:
    """E[x1 - x0 | x_t = x] for x0 ~ N(0, I), x1 ~ N(mu, sigma^2 I) drawn independently."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    var = (1 - t) ** 2 + t ** 2 * sigma ** 2
    gain = (t * sigma ** 2 - (1 - t)) / var
    return mu + gain * (x - t * mu)


class TimeLinearRegressor(Module):
    """u(x, t) = A(t) x + b(t), with A and b expanded in Legendre polynomials of t."""

    def __init__(self, dims: int, degree: int = 8):
        self.dims, self.degree = dims, degree
        self.weight = Parameter(np.zeros(((degree + 1) * (dims + 1), dims)))

    def features(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        basis = legendre.legvander(2 * np.asarray(t).reshape(-1) - 1, self.degree)  # B x (K+1)
        xa = np.concatenate([x, np.ones((len(x), 1))], axis=1)  # B x (A+1)
        return (basis[:, :, None] * xa[:, None, :]).reshape(len(x), -1)

    def __call__(self, x, cond, t, d) -> Tensor:
        return ops.matmul(Tensor(self.features(np.asarray(x), t)), self.weight)


def _relative_rms(model, mu, sigma, n, rng) -> float:
    dims = len(mu)
    x0 = rng.standard_normal((n, dims))
    x1 = mu + sigma * rng.standard_normal((n, dims))
    t = rng.random(n)
    xt = (1 - t)[:, None] * x0 + t[:, None] * x1
    truth = gaussian_velocity(xt, t, mu, sigma)
    with no_grad():
        pred = model(xt, None, t, np.zeros(n)).data.astype(np.float64)
    return float(np.sqrt(np.mean(np.sum((pred - truth) ** 2, axis=1)) / np.mean(np.sum(truth ** 2, axis=1))))


def fit_gaussian_flow(mu, sigma: float, iterations: int, batch: int = 2048, lr: float = 0.05, seed: int = 0):
    mu = np.asarray(mu, dtype=np.float64)
    model = TimeLinearRegressor(len(mu))
    opt = AdamW(model.parameters(), lr=lr)
    schedule = WarmupCosine(lr, iterations, warmup_steps=0, min_lr=lr * 1e-3)
    fm = StepSchedule()
    for it in range(iterations):
        g = rngs.stream(seed, f"gaussian-oracle/{it}")
        x0 = g.standard_normal((batch, len(mu)))
        x1 = mu + sigma * g.standard_normal((batch, len(mu)))
        t, d, is_sc = sample_t_d(fm, 0.0, g, batch)
        model.zero_grad()
        loss, _ = shortcut_loss(model, x0, x1, None, t, d, is_sc, schedule=fm)
        backward(loss)
        opt.step(schedule(it))
    return model


@dataclass
class OracleReport:
    mu: tuple
    sigma: float
    budgets: tuple
    rel_rms: tuple
    tolerance: float

    @property
    def final(self) -> float:
        return self.rel_rms[-1]

    @property
    def passed(self) -> bool:
        return self.final <= self.tolerance

    @property
    def monotone(self) -> bool:
        return all(a > b for a, b in zip(self.rel_rms, self.rel_rms[1:]))


def gaussian_oracle_check(
    dims: int = 2,
    trials: int = 20000,
    mu=None,
    sigma: float = 1.0,
    budgets=(50, 300, 2000),
    tolerance: float = 0.05,
    seed: int = 0,
) -> OracleReport:
    """Relative RMS gap between the fitted and closed-form velocity, per budget."""
    mu = np.asarray(mu if mu is not None else [2.0] + [0.0] * (dims - 1), dtype=np.float64)
    if len(mu) != dims:
        raise ValueError(f"mu has {len(mu)} entries for {dims} dims")
    errs = []
    for budget in budgets:
        model = fit_gaussian_flow(mu, sigma, budget, seed=seed)
        errs.append(_relative_rms(model, mu, sigma, trials, rngs.stream(seed, "gaussian-oracle/eval")))
    return OracleReport(tuple(mu.tolist()), sigma, tuple(budgets), tuple(errs), tolerance)


# ---------------------------------------------------------------------------
# 2-D toy shortcut task
# ---------------------------------------------------------------------------

TOY_MODES = np.array([[2.5, 0.5], [0.5, 2.0]])
TOY_STD = 0.35


def toy_data(n: int, rng: np.random.Generator) -> np.ndarray:
    """Equal mixture of two isotropic Gaussians in the plane."""
    which = rng.integers(0, len(TOY_MODES), size=n)
    return TOY_MODES[which] + TOY_STD * rng.standard_normal((n, 2))


class ToyShortcutNet(Module):
    """MLP velocity field on R^2 conditioned on Fourier features of t and d."""

    def __init__(self, rng: np.random.Generator, hidden: int = 128, bands: int = 8):
        self.freqs = np.pi * np.geomspace(1.0, 64.0, bands)
        self.mlp = MLP([2 + 4 * bands, hidden, hidden, hidden, 2], rng, activation=ops.silu)
        self.calls = 0
        self.evaluations = 0

    def __call__(self, h, cond, t, d) -> Tensor:
        h = h if isinstance(h, Tensor) else Tensor(h)
        self.calls += 1
        self.evaluations += h.shape[0]
        b = h.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (b,)).reshape(b, 1)
        d = np.broadcast_to(np.asarray(d, dtype=np.float64).reshape(-1), (b,)).reshape(b, 1)
        emb = Tensor(np.concatenate([fourier_features(t, self.freqs), fourier_features(d, self.freqs)], axis=1))
        return self.mlp(ops.concat([h, emb], axis=1))


@dataclass(frozen=True)
class ToyConfig:
    iterations: int = 4000
    batch: int = 512
    lr: float = 2e-3
    fraction: float = 0.25
    resolution: int = 128
    seed: int = 0


def train_toy_shortcut(config: ToyConfig = ToyConfig()) -> tuple[ToyShortcutNet, list[dict]]:
    net = ToyShortcutNet(rngs.stream(config.seed, "toy/init"))
    opt = AdamW(net.parameters(), lr=config.lr)
    lr = WarmupCosine(config.lr, config.iterations, warmup_steps=100, min_lr=config.lr * 0.01)
    schedule = StepSchedule(config.resolution)
    history = []
    for it in range(config.iterations):
        g = rngs.stream(config.seed, f"toy/batch/{it}")
        x1 = toy_data(config.batch, g)
        x0 = g.standard_normal(x1.shape)
        t, d, is_sc = sample_t_d(schedule, config.fraction, g, config.batch)
        net.zero_grad()
        loss, parts = shortcut_loss(net, x0, x1, None, t, d, is_sc, schedule=schedule)
        backward(loss)
        opt.step(lr(it))
        history.append({"iteration": it, **parts})
    return net, history


def moment_gaps(a: np.ndarray, b: np.ndarray) -> dict:
    """Relative mean and covariance (Frobenius) gaps of sample set ``a`` against reference ``b``."""
    ma, mb = a.mean(axis=0), b.mean(axis=0)
    ca, cb = np.cov(a.T), np.cov(b.T)
    return {
        "mean_rel": float(np.linalg.norm(ma - mb) / np.linalg.norm(mb)),
        "cov_rel": float(np.linalg.norm(ca - cb) / np.linalg.norm(cb)),
    }


def one_step_vs_euler(net, n: int = 10000, seed: int = 0, euler_steps: int = 512, schedule: StepSchedule | None = None) -> dict:
    """Compare 1-step shortcut samples with many-step d = 0 Euler samples from the same noise."""
    noise = rngs.stream(seed, "toy/eval-noise").standard_normal((n, 2))
    one = sample(net, None, 1, noise=noise, schedule=schedule)
    ref = euler_oracle(net, None, euler_steps, noise=noise)
    return {**moment_gaps(one.astype(np.float64), ref.astype(np.float64)), "one_step": one, "euler": ref}
