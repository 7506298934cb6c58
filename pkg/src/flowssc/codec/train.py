"""Codec training and reconstruction evaluation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .. import rng as rngs
from ..metrics import ConfusionStats, accumulate, iou, miou, per_class_iou
from ..synth.augment import dihedral
from ..tensor import AdamW, NonFiniteError, WarmupCosine, backward, clip_grad_norm, no_grad, reset_graph
from .loss import LossWeights, codec_loss
from .model import TriplaneCodec

log = logging.getLogger(__name__)

CSV_FIELDS = ("iteration", "loss", "iou", "miou")


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, detail: str):
        super().__init__(f"training diverged at iteration {iteration}: {detail}")
        self.iteration = iteration


@dataclass(frozen=True)
class CodecTrainConfig:
    iterations: int = 1200
    batch_size: int = 4
    lr: float = 2e-3
    warmup: int = 50
    min_lr: float = 2e-5
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    eval_every: int = 250
    eval_scenes: int = 32
    augment: bool = True
    seed: int = 0
    loss: LossWeights = field(default_factory=LossWeights)

    def schedule(self) -> WarmupCosine:
        return WarmupCosine(self.lr, self.iterations, self.warmup, self.min_lr)


def reconstruct(codec: TriplaneCodec, grids, batch_size: int = 8) -> np.ndarray:
    """Argmax reconstruction of each grid through encode -> decode."""
    out = []
    with no_grad():
        for i in range(0, len(grids), batch_size):
            chunk = [np.asarray(g) for g in grids[i:i + batch_size]]
            logits = codec.decode_grid(codec.encode(chunk))
            out.append(np.argmax(logits.data, axis=-1).astype(np.uint8))
    return np.concatenate(out, axis=0)


def evaluate_codec(codec: TriplaneCodec, grids, batch_size: int = 8) -> dict:
    stats = ConfusionStats(codec.config.num_classes)
    for pred, gt in zip(reconstruct(codec, grids, batch_size), grids):
        accumulate(pred, gt, stats)
    return {"iou": iou(stats), "miou": miou(stats), "per_class_iou": per_class_iou(stats), "stats": stats}


@dataclass
class CodecTrainResult:
    history: list[dict]
    evals: list[dict]
    best: dict | None
    optimizer: AdamW


def batch_indices(seed: int, iteration: int, n: int, batch: int) -> tuple[np.ndarray, np.ndarray]:
    g = rngs.stream(seed, f"codec/batch/{iteration}")
    return g.choice(n, size=min(batch, n), replace=False), g.integers(0, 8, size=min(batch, n))


def train_codec(
    codec: TriplaneCodec,
    train_grids,
    val_grids,
    config: CodecTrainConfig,
    *,
    start_iteration: int = 0,
    optimizer_state: dict | None = None,
    csv_path: str | Path | None = None,
    on_eval: Callable[[int, dict], None] | None = None,
) -> CodecTrainResult:
    """Optimise ``codec`` in place.  Batches and augmentations are drawn from
    per-iteration streams, so a resumed run replays the same sequence."""
    if len(train_grids) == 0:
        raise ValueError("training set is empty")
    params = codec.parameters()
    opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    if optimizer_state is not None:
        opt.load_state(optimizer_state)
    schedule = config.schedule()
    val = list(val_grids[: config.eval_scenes])
    history, evals, best = [], [], None

    writer = None
    if csv_path is not None:
        fresh = start_iteration == 0 or not Path(csv_path).exists()
        handle = open(csv_path, "w" if fresh else "a", newline="", buffering=1)
        writer = csv.DictWriter(handle, fieldnames=CSV_FIELDS)
        if fresh:
            writer.writeheader()
    try:
        for it in range(start_iteration, config.iterations):
            idx, rot = batch_indices(config.seed, it, len(train_grids), config.batch_size)
            batch = [np.asarray(train_grids[i]) for i in idx]
            if config.augment:
                batch = [dihedral(g, int(r)) for g, r in zip(batch, rot)]
            codec.zero_grad()
            try:
                logits = codec.decode_grid(codec.encode(batch))
                loss, parts = codec_loss(logits, np.stack(batch), config.loss)
                backward(loss)
            except NonFiniteError as err:
                reset_graph()
                raise TrainingDiverged(it, f"non-finite values in '{err.op}'") from err
            norm = clip_grad_norm(params, config.grad_clip) if config.grad_clip else 0.0
            if not np.isfinite(norm):
                raise TrainingDiverged(it, "non-finite gradient norm")
            opt.step(schedule(it))
            row = {"iteration": it, "loss": loss.item(), "iou": "", "miou": ""}
            last = it == config.iterations - 1
            if val and (last or (config.eval_every and (it + 1) % config.eval_every == 0)):
                metrics = evaluate_codec(codec, val)
                row["iou"], row["miou"] = metrics["iou"], metrics["miou"]
                evals.append({"iteration": it, **metrics})
                log.info("codec it %d loss %.4f iou %.4f miou %.4f", it, row["loss"], metrics["iou"], metrics["miou"])
                if best is None or metrics["miou"] > best["miou"]:
                    best = {"iteration": it, "miou": metrics["miou"], "iou": metrics["iou"], "state": codec.state_dict()}
                if on_eval is not None:
                    on_eval(it, metrics)
            history.append({**row, **parts})
            if writer is not None:
                writer.writerow(row)
    finally:
        if writer is not None:
            handle.close()
    return CodecTrainResult(history, evals, best, opt)
