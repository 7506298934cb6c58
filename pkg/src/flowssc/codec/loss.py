"""Reconstruction loss: cross-entropy plus scene-class affinity terms.

The affinity terms score soft precision, recall and specificity over the
whole batch.  The geometric term treats "not empty" as the positive class.
The semantic term repeats this for every class present in the target.
Each ratio r enters as ``-log r``, floored like a clamped binary
cross-entropy with target 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor import Tensor, ops

LOG_FLOOR = float(np.exp(-100.0))


@dataclass(frozen=True)
class LossWeights:
    ce: float = 1.0
    geo_scal: float = 0.5
    sem_scal: float = 0.5


def _nll(ratio: Tensor) -> Tensor:
    return -ops.log(ops.clamp_min(ratio, LOG_FLOOR))


def geo_scal_terms(probs: Tensor, gt: np.ndarray) -> dict[str, Tensor]:
    """Soft precision / recall / specificity of occupancy; probs is N x K."""
    target = (gt.reshape(-1) != 0).astype(probs.dtype)
    p_empty = probs[:, 0]
    p_occ = 1.0 - p_empty
    inter = ops.sum(p_occ * target)
    out = {}
    if target.sum() > 0:
        out["precision"] = inter / ops.sum(p_occ)
        out["recall"] = inter / float(target.sum())
    if (1 - target).sum() > 0:
        out["specificity"] = ops.sum(p_empty * (1 - target)) / float((1 - target).sum())
    return out


def sem_scal_terms(probs: Tensor, gt: np.ndarray) -> dict[int, dict[str, Tensor]]:
    """Per-class soft precision / recall / specificity for classes present in ``gt``."""
    flat = gt.reshape(-1)
    out = {}
    for k in range(probs.shape[1]):
        target = (flat == k).astype(probs.dtype)
        if target.sum() == 0:
            continue
        p = probs[:, k]
        inter = ops.sum(p * target)
        terms = {"recall": inter / float(target.sum())}
        if ops.sum(p).item() > 0:
            terms["precision"] = inter / ops.sum(p)
        if (1 - target).sum() > 0:
            terms["specificity"] = ops.sum((1.0 - p) * (1 - target)) / float((1 - target).sum())
        out[k] = terms
    return out


def geo_scal_loss(probs: Tensor, gt: np.ndarray) -> Tensor:
    terms = list(geo_scal_terms(probs, gt).values())
    total = _nll(terms[0])
    for t in terms[1:]:
        total = total + _nll(t)
    return total


def sem_scal_loss(probs: Tensor, gt: np.ndarray) -> Tensor:
    per_class = []
    for terms in sem_scal_terms(probs, gt).values():
        vals = list(terms.values())
        acc = _nll(vals[0])
        for v in vals[1:]:
            acc = acc + _nll(v)
        per_class.append(acc)
    total = per_class[0]
    for t in per_class[1:]:
        total = total + t
    return total * (1.0 / len(per_class))


def codec_loss(logits: Tensor, gt: np.ndarray, weights: LossWeights = LossWeights()) -> tuple[Tensor, dict]:
    """Weighted sum of the three terms over a batch; ``logits`` is (..., K)
    matching ``gt`` (...).  Returns the loss and the scalar parts."""
    k = logits.shape[-1]
    gt = np.asarray(gt)
    if logits.shape[:-1] != gt.shape:
        raise ValueError(f"logits {logits.shape} do not match labels {gt.shape}")
    flat = ops.reshape(logits, (-1, k))
    labels = gt.reshape(-1).astype(np.int64)
    ce = ops.cross_entropy(flat, labels)
    probs = ops.softmax_lastdim(flat)
    geo = geo_scal_loss(probs, labels)
    sem = sem_scal_loss(probs, labels)
    total = ce * weights.ce + geo * weights.geo_scal + sem * weights.sem_scal
    parts = {"ce": ce.item(), "geo_scal": geo.item(), "sem_scal": sem.item()}
    return total, parts
