"""Run configuration: nested dataclasses loaded from YAML with strict keys.

Every field has a default, so an empty file is a valid config; the resolved
config (defaults included) is dumped next to each run's outputs.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..codec import CodecConfig, LossWeights
from ..codec.train import CodecTrainConfig
from ..dit import DiTConfig
from ..flow.train import FlowTrainConfig
from ..synth import DegradeSpec, SceneSpec
from ..triplane import TriplaneLayout


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    scenes: int = 600
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    dims: tuple[int, int, int] = (32, 32, 8)
    num_classes: int = 5
    occluded_dropout: float = 0.3
    occluded_mislabel: float = 0.1
    visible_noise: float = 0.02
    path: str = "data.voxd"

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(dims=tuple(self.dims), num_classes=self.num_classes)

    def degrade_spec(self) -> DegradeSpec:
        return DegradeSpec(self.occluded_dropout, self.occluded_mislabel, self.visible_noise)


@dataclass
class CodecSection:
    kind: str = "xattn"
    triplane_hw: int = 16
    triplane_d: int = 4
    channels: int = 16
    fourier_bands: int = 8
    heads: int = 4
    width: int = 64
    self_attn_layers: int = 2
    key_scale: float = 3.0
    decoder_hidden: int = 64
    conv_hidden: int = 32
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
    lambda_ce: float = 1.0
    lambda_geo: float = 0.5
    lambda_sem: float = 0.5
    checkpoint: str = "codec.ckpt"


@dataclass
class FlowSection:
    patch: int = 2
    embed: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    time_bands: int = 16
    iterations: int = 3000
    batch_size: int = 16
    lr: float = 1e-3
    warmup: int = 100
    min_lr: float = 1e-5
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    fraction: float = 0.25
    resolution: int = 128
    ema_decay: float = 0.0
    augment: bool = True
    checkpoint: str = "flow.ckpt"


@dataclass
class EvalSection:
    n_steps: int = 1
    steps: tuple[int, ...] = (1, 2, 4, 8, 16)
    scenes: int = 0  # 0: the whole held-out split
    split: str = "test"


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    codec: CodecSection = field(default_factory=CodecSection)
    flow: FlowSection = field(default_factory=FlowSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- derived component configs ----------------------------------------
    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def path(self, name: str) -> Path:
        p = Path(name)
        return p if p.is_absolute() else self.out / p

    def layout(self) -> TriplaneLayout:
        c = self.codec
        return TriplaneLayout(c.triplane_hw, c.triplane_hw, c.triplane_d, c.channels)

    def codec_config(self, kind: str | None = None) -> CodecConfig:
        c = self.codec
        return CodecConfig(
            dims=tuple(self.data.dims), num_classes=self.data.num_classes, layout=self.layout(),
            kind=kind or c.kind, fourier_bands=c.fourier_bands, heads=c.heads, width=c.width,
            self_attn_layers=c.self_attn_layers, key_scale=c.key_scale, decoder_hidden=c.decoder_hidden,
            conv_hidden=c.conv_hidden,
        )

    def codec_train_config(self) -> CodecTrainConfig:
        c = self.codec
        return CodecTrainConfig(
            iterations=c.iterations, batch_size=c.batch_size, lr=c.lr, warmup=c.warmup, min_lr=c.min_lr,
            weight_decay=c.weight_decay, grad_clip=c.grad_clip, eval_every=c.eval_every,
            eval_scenes=c.eval_scenes, augment=c.augment, seed=self.seed,
            loss=LossWeights(c.lambda_ce, c.lambda_geo, c.lambda_sem),
        )

    def dit_config(self) -> DiTConfig:
        f = self.flow
        return DiTConfig(self.layout(), f.patch, f.embed, f.depth, f.heads, f.mlp_ratio, f.time_bands)

    def flow_train_config(self) -> FlowTrainConfig:
        f = self.flow
        return FlowTrainConfig(
            iterations=f.iterations, batch_size=f.batch_size, lr=f.lr, warmup=f.warmup, min_lr=f.min_lr,
            weight_decay=f.weight_decay, grad_clip=f.grad_clip, fraction=f.fraction,
            resolution=f.resolution, ema_decay=f.ema_decay, seed=self.seed,
        )

    def validate(self) -> "RunConfig":
        try:
            self.codec_config()
            self.dit_config()
            self.flow_train_config()
            self.data.degrade_spec()
            self.flow_train_config().schedule.check_steps(self.eval.n_steps)
            for s in self.eval.steps:
                self.flow_train_config().schedule.check_steps(s)
        except (ValueError, TypeError) as err:
            raise ConfigError(str(err)) from err
        if self.eval.split not in ("train", "val", "test"):
            raise ConfigError(f"eval.split must be train, val or test, not {self.eval.split!r}")
        if len(self.data.split) != 3 or abs(sum(self.data.split) - 1.0) > 1e-9:
            raise ConfigError("data.split needs three ratios summing to 1")
        return self


def _coerce(value, hint, where: str):
    origin = typing.get_origin(hint)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"{where} must be a mapping")
        return _build(hint, value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list")
        args = typing.get_args(hint)
        inner = args[0]
        if len(args) != 2 or args[1] is not Ellipsis:
            if len(value) != len(args):
                raise ConfigError(f"{where} needs {len(args)} entries, got {len(value)}")
        return tuple(_coerce(v, inner, f"{where}[{i}]") for i, v in enumerate(value))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if hint is float:
        if isinstance(value, str):
            # YAML 1.1 reads exponents without a dot (1e-3) as strings
            try:
                return float(value)
            except ValueError:
                raise ConfigError(f"{where} must be a number") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    raise ConfigError(f"unsupported config type at {where}")


def _build(cls, raw: dict, where: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join((where + '.' if where else '') + k for k in unknown)}")
    kwargs = {k: _coerce(v, hints[k], f"{where}.{k}" if where else k) for k, v in raw.items()}
    return cls(**kwargs)


def _apply_override(raw: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, text = assignment.split("=", 1)
    try:
        value = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError(f"cannot parse override value {text!r}: {err}") from err
    node = raw
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-mapping")
    node[parts[-1]] = value


def load_config(path: str | Path | None = None, overrides: list[str] | tuple = ()) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as err:
            raise ConfigError(f"invalid YAML in {path}: {err}") from err
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a mapping at top level")
    for o in overrides:
        _apply_override(raw, o)
    return _build(RunConfig, raw).validate()


def to_dict(config: RunConfig) -> dict:
    def plain(v):
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        return v
    return plain(dataclasses.asdict(config))


def dump_config(config: RunConfig, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(to_dict(config), sort_keys=False))
