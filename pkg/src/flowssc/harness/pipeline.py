"""Stage implementations shared by the CLI and the test-suite.

Every stage is a function of (RunConfig, files under ``output_dir``); all
randomness comes from named streams of ``config.seed``.
"""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import rng as rngs
from ..codec import TriplaneCodec
from ..codec.train import train_codec
from ..dit import DiT
from ..flow.shortcut import sample
from ..flow.train import train_flow
from ..synth import augment_8x, class_census, degrade, generate_scene, read_dataset, split_dataset, write_dataset
from ..tensor import no_grad
from .checkpoint import Checkpoint, load_checkpoint, prefixed, save_checkpoint
from .config import ConfigError, RunConfig, dump_config, to_dict

log = logging.getLogger(__name__)


def scene_seed(seed: int, index: int) -> int:
    return rngs.stream_key(f"scene/{seed}/{index}") & 0x7FFFFFFF


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def generate_records(config: RunConfig, count: int | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
    spec, dspec = config.data.scene_spec(), config.data.degrade_spec()
    out = []
    for i in range(config.data.scenes if count is None else count):
        s = scene_seed(config.seed, i)
        gt = generate_scene(spec, s)
        out.append((gt, degrade(gt, dspec, s, spec.num_classes)))
    return out


def cmd_gen_data(config: RunConfig) -> dict:
    records = generate_records(config)
    path = config.path(config.data.path)
    header = write_dataset(path, records, config.data.num_classes)
    census = class_census(np.stack([g for g, _ in records]), config.data.num_classes)
    dump_config(config, config.path("config.resolved.yaml"))
    return {"path": str(path), "count": header.count, "bytes": header.file_size, "census": census}


@dataclass
class Splits:
    gt: dict[str, np.ndarray]
    coarse: dict[str, np.ndarray]


def load_splits(config: RunConfig) -> Splits:
    path = config.path(config.data.path)
    if not path.exists():
        raise FileNotFoundError(f"dataset {path} not found (run gen-data first)")
    records, header = read_dataset(path)
    if header.dims != tuple(config.data.dims) or header.num_classes != config.data.num_classes:
        raise ConfigError(f"dataset {path} has dims {header.dims}/K={header.num_classes}, config expects "
                          f"{tuple(config.data.dims)}/K={config.data.num_classes}")
    parts = split_dataset(len(records), config.data.split, config.seed)
    gt, coarse = {}, {}
    for name, idx in zip(("train", "val", "test"), parts):
        gt[name] = np.stack([records[i][0] for i in idx]) if idx else np.zeros((0, *header.dims), np.uint8)
        coarse[name] = np.stack([records[i][1] for i in idx]) if idx else np.zeros((0, *header.dims), np.uint8)
    return Splits(gt, coarse)


def eval_subset(config: RunConfig, splits: Splits) -> tuple[np.ndarray, np.ndarray]:
    gt, coarse = splits.gt[config.eval.split], splits.coarse[config.eval.split]
    n = config.eval.scenes or len(gt)
    if len(gt) == 0:
        raise ConfigError(f"evaluation split {config.eval.split!r} is empty")
    return gt[:n], coarse[:n]


# ---------------------------------------------------------------------------
# codec
# ---------------------------------------------------------------------------

def codec_path(config: RunConfig, kind: str | None = None) -> Path:
    kind = kind or config.codec.kind
    name = Path(config.codec.checkpoint)
    if kind != config.codec.kind:
        name = name.with_name(f"{name.stem}_{kind}{name.suffix}")
    return config.path(str(name))


def build_codec(config: RunConfig, kind: str | None = None) -> TriplaneCodec:
    cc = config.codec_config(kind)
    return TriplaneCodec(cc, rngs.stream(config.seed, f"codec/init/{cc.kind}"))


def save_model(path: Path, model, digest: bytes, meta: dict, optimizer=None, extra: dict | None = None) -> None:
    tensors = prefixed("param", model.state_dict())
    if optimizer is not None:
        tensors.update(prefixed("opt", optimizer.state()))
    if extra:
        tensors.update(extra)
    save_checkpoint(path, Checkpoint(digest, tensors, meta))


def load_codec(config: RunConfig, kind: str | None = None, path: Path | None = None) -> tuple[TriplaneCodec, Checkpoint]:
    codec = build_codec(config, kind)
    path = path or codec_path(config, kind)
    if not Path(path).exists():
        raise FileNotFoundError(f"codec checkpoint {path} not found (run train-codec first)")
    ckpt = load_checkpoint(path, codec.config.digest())
    codec.load_state_dict(ckpt.group("param"))
    return codec, ckpt


def cmd_train_codec(config: RunConfig, resume: bool = False, kind: str | None = None) -> dict:
    splits = load_splits(config)
    codec = build_codec(config, kind)
    tc = config.codec_train_config()
    path = codec_path(config, kind)
    start, opt_state = 0, None
    if resume and path.exists():
        ckpt = load_checkpoint(path, codec.config.digest())
        codec.load_state_dict(ckpt.group("param"))
        start, opt_state = int(ckpt.meta["iteration"]), ckpt.group("opt")
    dump_config(config, config.path("config.resolved.yaml"))
    digest = codec.config.digest()
    stem = path.with_suffix("")
    best_path = stem.with_name(stem.name + "_best.ckpt")

    result = train_codec(
        codec, splits.gt["train"], splits.gt["val"], tc,
        start_iteration=start, optimizer_state=opt_state, csv_path=stem.with_name(stem.name + "_log.csv"),
    )
    meta = {"kind": codec.config.kind, "iteration": tc.iterations, "structure": codec.config.structure(),
            "config": to_dict(config)}
    save_model(path, codec, digest, meta, result.optimizer)
    summary = {"path": str(path), "iterations": tc.iterations - start}
    if result.best is not None:
        best = TriplaneCodec(codec.config, rngs.stream(0, "unused"))
        best.load_state_dict(result.best["state"])
        save_model(best_path, best, digest, {**meta, "iteration": result.best["iteration"] + 1})
        summary.update(best_miou=result.best["miou"], best_iou=result.best["iou"])
    if result.evals:
        summary.update(iou=result.evals[-1]["iou"], miou=result.evals[-1]["miou"])
    return summary


def encode_grids(codec: TriplaneCodec, grids, batch: int = 16) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(grids), batch):
            out.append(codec.encode(list(grids[i:i + batch])).data)
    return np.concatenate(out, axis=0)


def decode_latents(codec: TriplaneCodec, latents: np.ndarray, batch: int = 16) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(latents), batch):
            logits = codec.decode_grid(latents[i:i + batch])
            out.append(np.argmax(logits.data, axis=-1).astype(np.uint8))
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# flow
# ---------------------------------------------------------------------------

def flow_digest(config: RunConfig) -> bytes:
    return hashlib.sha256(config.dit_config().digest() + config.codec_config().digest()).digest()


def build_net(config: RunConfig) -> DiT:
    return DiT(config.dit_config(), rngs.stream(config.seed, "flow/init"))


def load_net(config: RunConfig) -> tuple[DiT, Checkpoint]:
    net = build_net(config)
    path = config.path(config.flow.checkpoint)
    if not path.exists():
        raise FileNotFoundError(f"flow checkpoint {path} not found (run train-flow first)")
    ckpt = load_checkpoint(path, flow_digest(config))
    net.load_state_dict(ckpt.group("param"))
    return net, ckpt


def training_latents(config: RunConfig, codec: TriplaneCodec, splits: Splits) -> tuple[np.ndarray, np.ndarray]:
    """Frozen-codec latents of (gt, coarse) training pairs, optionally with all
    eight footprint symmetries applied jointly to both grids."""
    gt, coarse = splits.gt["train"], splits.coarse["train"]
    if config.flow.augment:
        gt = np.stack([v for g in gt for v in augment_8x(g)])
        coarse = np.stack([v for c in coarse for v in augment_8x(c)])
    return encode_grids(codec, gt), encode_grids(codec, coarse)


def cmd_train_flow(config: RunConfig, resume: bool = False) -> dict:
    splits = load_splits(config)
    codec, _ = load_codec(config)
    if config.dit_config().layout != codec.config.layout:
        raise ConfigError("flow network and codec disagree on the triplane layout")
    gt_lat, cond_lat = training_latents(config, codec, splits)
    net = build_net(config)
    fc = config.flow_train_config()
    path = config.path(config.flow.checkpoint)
    start, opt_state, ema_state = 0, None, None
    if resume and path.exists():
        ckpt = load_checkpoint(path, flow_digest(config))
        net.load_state_dict(ckpt.group("param"))
        start, opt_state = int(ckpt.meta["iteration"]), ckpt.group("opt")
        ema_state = ckpt.group("ema") or None
    dump_config(config, config.path("config.resolved.yaml"))
    result = train_flow(
        net, gt_lat, cond_lat, fc, mask=net.mask, start_iteration=start, optimizer_state=opt_state,
        ema_state=ema_state, csv_path=path.with_name(path.stem + "_log.csv"),
    )
    extra = prefixed("ema", result.ema.state_dict()) if result.ema is not None else None
    meta = {"iteration": fc.iterations, "structure": config.dit_config().structure(), "config": to_dict(config)}
    save_model(path, net, flow_digest(config), meta, result.optimizer, extra)
    tail = result.history[-100:]
    return {
        "path": str(path),
        "iterations": fc.iterations - start,
        "final_total": float(np.mean([r["total"] for r in tail])) if tail else float("nan"),
    }


# ---------------------------------------------------------------------------
# refinement
# ---------------------------------------------------------------------------

@dataclass
class Refinement:
    predictions: np.ndarray
    sample_seconds: float
    net_evaluations: int


def scene_noise(seed: int, indices, shape) -> np.ndarray:
    return np.stack([rngs.stream(seed, f"refine/noise/{i}").standard_normal(shape) for i in indices])


def refine(codec: TriplaneCodec, net: DiT, coarse: np.ndarray, n_steps: int, seed: int,
           schedule=None, batch: int = 16, cond_latents: np.ndarray | None = None) -> Refinement:
    """coarse grids -> encode -> shortcut sample -> decode -> argmax labels.
    Only the sampling call is timed."""
    cond = encode_grids(codec, coarse) if cond_latents is None else cond_latents
    latents, elapsed = [], 0.0
    rows_before = getattr(net, "evaluations", 0)
    for i in range(0, len(cond), batch):
        c = cond[i:i + batch]
        noise = scene_noise(seed, range(i, i + len(c)), c.shape[1:]).astype(c.dtype)
        t0 = time.perf_counter()
        latents.append(sample(net, c, n_steps, noise=noise, schedule=schedule))
        elapsed += time.perf_counter() - t0
    preds = decode_latents(codec, np.concatenate(latents, axis=0))
    return Refinement(preds, elapsed, getattr(net, "evaluations", 0) - rows_before)
