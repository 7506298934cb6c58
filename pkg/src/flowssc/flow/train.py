"""Shortcut training of a velocity network on (ground-truth, coarse) latent pairs."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import rng as rngs
from ..codec.train import TrainingDiverged
from ..tensor import AdamW, Module, NonFiniteError, WarmupCosine, backward, clip_grad_norm, reset_graph
from .shortcut import StepSchedule, sample_t_d, shortcut_loss

log = logging.getLogger(__name__)

CSV_FIELDS = ("iteration", "fm_loss", "sc_loss", "total")


@dataclass(frozen=True)
class FlowTrainConfig:
    iterations: int = 3000
    batch_size: int = 16
    lr: float = 1e-3
    warmup: int = 100
    min_lr: float = 1e-5
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    fraction: float = 0.25
    resolution: int = 128
    ema_decay: float = 0.0  # 0 keeps the target on the live weights
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError(f"fraction must lie in [0, 1], got {self.fraction}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")

    @property
    def schedule(self) -> StepSchedule:
        return StepSchedule(self.resolution)


@dataclass
class FlowBatch:
    h_noise: np.ndarray
    h_gt: np.ndarray
    cond: np.ndarray
    t: np.ndarray
    d: np.ndarray
    is_sc: np.ndarray


def draw_batch(gt_latents: np.ndarray, cond_latents: np.ndarray, config: FlowTrainConfig, iteration: int) -> FlowBatch:
    g = rngs.stream(config.seed, f"flow/batch/{iteration}")
    n = len(gt_latents)
    idx = g.choice(n, size=min(config.batch_size, n), replace=False)
    h_gt = gt_latents[idx]
    noise = g.standard_normal(h_gt.shape).astype(h_gt.dtype)
    t, d, is_sc = sample_t_d(config.schedule, config.fraction, g, len(idx))
    return FlowBatch(noise, h_gt, cond_latents[idx], t, d, is_sc)


@dataclass
class FlowTrainResult:
    history: list[dict]
    optimizer: AdamW
    ema: Module | None


def train_flow(
    net: Module,
    gt_latents: np.ndarray,
    cond_latents: np.ndarray,
    config: FlowTrainConfig,
    *,
    mask: np.ndarray | None = None,
    start_iteration: int = 0,
    optimizer_state: dict | None = None,
    ema_state: dict | None = None,
    csv_path: str | Path | None = None,
    stop_iteration: int | None = None,
) -> FlowTrainResult:
    """Optimise ``net`` in place on the joint flow-matching / self-consistency objective.

    ``stop_iteration`` ends the run early without changing the learning-rate
    schedule, so a run split into chunks matches an uninterrupted one.
    """
    gt_latents, cond_latents = np.asarray(gt_latents), np.asarray(cond_latents)
    if gt_latents.shape != cond_latents.shape or len(gt_latents) == 0:
        raise ValueError(f"latent sets must be non-empty and aligned: {gt_latents.shape} vs {cond_latents.shape}")
    params = net.parameters()
    opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    if optimizer_state is not None:
        opt.load_state(optimizer_state)
    ema = None
    if config.ema_decay > 0:
        ema = copy.deepcopy(net)
        if ema_state is not None:
            ema.load_state_dict(ema_state)
    lr = WarmupCosine(config.lr, config.iterations, config.warmup, config.min_lr)
    history = []

    writer = None
    if csv_path is not None:
        fresh = start_iteration == 0 or not Path(csv_path).exists()
        handle = open(csv_path, "w" if fresh else "a", newline="", buffering=1)
        writer = csv.DictWriter(handle, fieldnames=CSV_FIELDS, extrasaction="ignore")
        if fresh:
            writer.writeheader()
    try:
        end = config.iterations if stop_iteration is None else min(stop_iteration, config.iterations)
        for it in range(start_iteration, end):
            batch = draw_batch(gt_latents, cond_latents, config, it)
            net.zero_grad()
            try:
                loss, parts = shortcut_loss(
                    net, batch.h_noise, batch.h_gt, batch.cond, batch.t, batch.d, batch.is_sc,
                    mask=mask, schedule=config.schedule, target_net=ema,
                )
                backward(loss)
            except NonFiniteError as err:
                reset_graph()
                raise TrainingDiverged(it, f"non-finite values in '{err.op}'") from err
            norm = clip_grad_norm(params, config.grad_clip) if config.grad_clip else 0.0
            if not np.isfinite(norm):
                raise TrainingDiverged(it, "non-finite gradient norm")
            opt.step(lr(it))
            if ema is not None:
                for p_ema, p in zip(ema.parameters(), params):
                    p_ema.data = (config.ema_decay * p_ema.data + (1 - config.ema_decay) * p.data).astype(p.dtype)
            row = {"iteration": it, **parts}
            history.append(row)
            if writer is not None:
                writer.writerow(row)
            if (it + 1) % 100 == 0:
                log.info("flow it %d fm %.4f sc %.4f total %.4f", it, parts["fm_loss"], parts["sc_loss"], parts["total"])
    finally:
        if writer is not None:
            handle.close()
    return FlowTrainResult(history, opt, ema)
