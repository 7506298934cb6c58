"""Ablation tables: refiner gain, sampling-step count and codec architecture.

Every table is a list of rows with the fixed column order
``experiment, variant, iou, miou, iou_<class>..., wall_ms``.  mIoU averages
the non-empty classes present in prediction or ground truth.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .metrics import evaluate, iou, miou, per_class_iou
from .synth import CLASS_NAMES


def class_columns(num_classes: int) -> list[str]:
    names = CLASS_NAMES if num_classes == len(CLASS_NAMES) else [f"class{k}" for k in range(num_classes)]
    return [f"iou_{n}" for n in names[1:]]


def columns(num_classes: int) -> list[str]:
    return ["experiment", "variant", "iou", "miou", *class_columns(num_classes), "wall_ms"]


def score_row(experiment: str, variant: str, preds, gts, num_classes: int, wall_ms: float = float("nan")) -> dict:
    stats = evaluate(preds, gts, num_classes)
    row = {"experiment": experiment, "variant": variant, "iou": iou(stats), "miou": miou(stats)}
    row.update(zip(class_columns(num_classes), per_class_iou(stats)[1:].tolist()))
    row["wall_ms"] = wall_ms
    return row


def write_table(path: str | Path, rows: list[dict], num_classes: int) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns(num_classes))
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def read_table(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return v


def refiner_ablation(gts, coarse, refined, num_classes: int, wall_ms: float = float("nan")) -> list[dict]:
    """Coarse-only versus refined predictions, followed by a delta row."""
    base = score_row("refiner", "coarse", coarse, gts, num_classes)
    ref = score_row("refiner", "refined", refined, gts, num_classes, wall_ms)
    delta = {"experiment": "refiner", "variant": "delta"}
    for k in columns(num_classes)[2:-1]:
        delta[k] = ref[k] - base[k]
    delta["wall_ms"] = float("nan")
    return [base, ref, delta]


def steps_ablation(run_steps, gts, steps, num_classes: int) -> list[dict]:
    """``run_steps(n)`` returns (predictions, sample seconds); wall_ms is per scene."""
    rows = []
    for n in steps:
        preds, seconds = run_steps(n)
        rows.append(score_row("steps", str(n), preds, gts, num_classes, 1000.0 * seconds / len(gts)))
    return rows


def codec_comparison(reconstructions: dict[str, np.ndarray], gts, num_classes: int) -> list[dict]:
    return [score_row("codec", name, preds, gts, num_classes) for name, preds in reconstructions.items()]
