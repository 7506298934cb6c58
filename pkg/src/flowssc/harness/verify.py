"""Oracle suite behind ``flowssc verify``."""

from __future__ import annotations

from dataclasses import dataclass

from .. import rng as rngs
from ..flow import StepSchedule, ToyConfig, consistency_residual, gaussian_oracle_check, one_step_vs_euler, train_toy_shortcut
from ..gradsuite import run_suite
from ..tensor.nn import variance_scaled
from . import pipeline
from .config import RunConfig

RESIDUAL_LIMIT = 0.10


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    value: float = float("nan")


def untrained_net(config: RunConfig):
    """A fresh network whose zero-initialised layers (AdaLN maps and output
    head) are redrawn with the ordinary random init.

    The as-built network predicts exactly zero, which makes the residual ratio
    0/0; redrawing those layers gives a non-trivial field that has never seen
    the consistency objective.
    """
    net = pipeline.build_net(config)
    g = rngs.stream(config.seed, "verify/untrained")
    for layer in [b.adaln for b in net.blocks] + [net.final_adaln, net.head]:
        fan_in, fan_out = layer.weight.shape
        layer.weight.data = variance_scaled(g, fan_in, fan_out).astype(layer.weight.dtype)
    return net


def residual_on(net, codec, gts, coarse, config: RunConfig) -> dict:
    gt_lat = pipeline.encode_grids(codec, gts)
    cond = pipeline.encode_grids(codec, coarse)
    noise = rngs.stream(config.seed, "verify/residual-noise").standard_normal(gt_lat.shape).astype(gt_lat.dtype)
    return consistency_residual(
        net, noise, gt_lat, cond, rngs.stream(config.seed, "verify/residual-td"),
        StepSchedule(config.flow.resolution), mask=getattr(net, "mask", None),
    )


def run_verification(config: RunConfig, quick: bool = False) -> list[Check]:
    checks = []
    grads = run_suite(trials_per_case=2 if quick else 4, seed=config.seed)
    worst = max(grads, key=lambda r: r.error / r.tolerance)
    checks.append(Check("gradients", all(r.passed for r in grads),
                        f"{len(grads)} trials, worst {worst.name} rel err {worst.error:.2e}", worst.error))

    report = gaussian_oracle_check(budgets=(20, 100, 500) if quick else (50, 300, 2000), seed=config.seed)
    checks.append(Check("gaussian_oracle", report.passed and report.monotone,
                        f"rel RMS by budget {[round(e, 4) for e in report.rel_rms]}", report.final))

    toy, _ = train_toy_shortcut(ToyConfig(iterations=800 if quick else 3000, seed=config.seed))
    gaps = one_step_vs_euler(toy, n=2000 if quick else 10000, seed=config.seed, euler_steps=128 if quick else 512)
    checks.append(Check("one_step_vs_euler", gaps["mean_rel"] <= 0.05 and gaps["cov_rel"] <= 0.10,
                        f"mean gap {gaps['mean_rel']:.4f}, covariance gap {gaps['cov_rel']:.4f}", gaps["cov_rel"]))

    if pipeline.codec_path(config).exists() and config.path(config.flow.checkpoint).exists():
        codec, _ = pipeline.load_codec(config)
        net, _ = pipeline.load_net(config)
        splits = pipeline.load_splits(config)
        gts, coarse = splits.gt["val"], splits.coarse["val"]
        trained = residual_on(net, codec, gts, coarse, config)
        checks.append(Check("consistency_residual", trained["ratio"] < RESIDUAL_LIMIT,
                            f"trained ratio {trained['ratio']:.4f} (limit {RESIDUAL_LIMIT})", trained["ratio"]))
        control = residual_on(untrained_net(config), codec, gts, coarse, config)
        checks.append(Check("consistency_negative_control", control["ratio"] >= RESIDUAL_LIMIT,
                            f"untrained ratio {control['ratio']:.4f} must not pass", control["ratio"]))
    else:
        checks.append(Check("consistency_residual", True, "skipped: no trained checkpoints in output_dir"))
    return checks
