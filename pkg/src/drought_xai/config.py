"""Run configuration: a flat ``section.key = value`` text file.

Every hyperparameter defaults to the published training setup; a config file
only lists what it changes. Unknown keys and unparsable values raise
:class:`ConfigError`.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentationPolicy, BatchSpec
from .errors import ConfigError
from .model import BACKBONE_DEFAULTS, BackboneSpec, HeadConfig
from .train import TrainingConfig


@dataclass
class DataSection:
    train_annotations: str = ""
    test_annotations: str = ""
    image_dir: str = ""
    patch_dir: str = "patches"
    split_fraction: float = 0.2
    stratify: bool = True


@dataclass
class BackboneSection:
    name: str = "densenet121"
    weights: str = "pretrained_imagenet"
    trainable: bool = True
    # 0 means "the backbone's native value"
    feature_dim: int = 0
    input_size: tuple[int, ...] = ()
    weights_path: str = ""


@dataclass
class AugmentSection:
    rescale: float = 1.0 / 255.0
    shear_range: float = 0.2
    rotation_range_deg: float = 30.0
    width_shift_range: float = 0.2
    height_shift_range: float = 0.2
    horizontal_flip: bool = True
    vertical_flip: bool = True
    fill_mode: str = "nearest"


@dataclass
class BatchSection:
    batch_size: int = 128
    class_mode: str = "binary"
    shuffle: bool = True


@dataclass
class HeadSection:
    dense_widths: tuple[int, ...] = (128, 64)
    dropout_rate: float = 0.5
    l2_weight: float = 0.01
    activation: str = "relu"
    output_activation: str = "sigmoid"


@dataclass
class TrainSection:
    initial_lr: float = 0.001
    decay_rate: float = 0.9
    decay_every_epochs: int = 2
    staircase: bool = True
    epochs: int = 60
    loss: str = "binary_cross_entropy"
    optimizer: str = "adam"


@dataclass
class EvaluateSection:
    threshold: float = 0.5


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    batch: BatchSection = field(default_factory=BatchSection)
    head: HeadSection = field(default_factory=HeadSection)
    train: TrainSection = field(default_factory=TrainSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)
    out_dir: str = "out"
    seed: int = 42

    # -- typed views consumed by the pipeline modules

    def backbone_spec(self) -> BackboneSpec:
        b = self.backbone
        overrides = {"weights": b.weights, "trainable": b.trainable,
                     "weights_path": b.weights_path or None}
        if b.feature_dim:
            overrides["feature_dim"] = b.feature_dim
        if b.input_size:
            overrides["input_size"] = tuple(b.input_size)
        return BackboneSpec.for_name(b.name, **overrides)

    def head_config(self) -> HeadConfig:
        return HeadConfig(**dataclasses.asdict(self.head))

    def policy(self) -> AugmentationPolicy:
        return AugmentationPolicy(**dataclasses.asdict(self.augment), seed=self.seed)

    def batch_spec(self) -> BatchSpec:
        return BatchSpec(target_size=self.backbone_spec().input_size, **dataclasses.asdict(self.batch))

    def training_config(self) -> TrainingConfig:
        return TrainingConfig(**dataclasses.asdict(self.train), batch_size=self.batch.batch_size, seed=self.seed)

    def validate(self) -> RunConfig:
        """Build every typed view once so bad values surface as ConfigError up front."""
        try:
            if self.backbone.name not in BACKBONE_DEFAULTS:
                raise ValueError(f"unknown backbone {self.backbone.name!r}")
            self.backbone_spec(), self.head_config(), self.policy(), self.batch_spec(), self.training_config()
            if not 0 < self.data.split_fraction < 1:
                raise ValueError("data.split_fraction must lie in (0, 1)")
            if not 0 <= self.evaluate.threshold <= 1:
                raise ValueError("evaluate.threshold must lie in [0, 1]")
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    # -- text format

    def to_text(self) -> str:
        return "".join(f"{key} = {_format(value)}\n" for key, value in flatten(self).items())

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> RunConfig:
        config = cls()
        seen = set()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or not key:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
            if key in seen:
                raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
            seen.add(key)
            set_key(config, key, value, where=f"{source}:{lineno}")
        return config

    @classmethod
    def from_file(cls, path: str | Path) -> RunConfig:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text, str(path))


def _sections() -> dict[str, type]:
    hints = typing.get_type_hints(RunConfig)
    return {f.name: hints[f.name] for f in dataclasses.fields(RunConfig)}


def flatten(config: RunConfig) -> dict[str, object]:
    out: dict[str, object] = {}
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if dataclasses.is_dataclass(value):
            for sub in dataclasses.fields(value):
                out[f"{f.name}.{sub.name}"] = getattr(value, sub.name)
        else:
            out[f.name] = value
    return out


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, kind, where: str):
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in ("true", "yes", "1"):
                return True
            if lowered in ("false", "no", "0"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is str:
            return text
        if typing.get_origin(kind) is tuple:
            return tuple(int(v) for v in text.replace("x", ",").split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {getattr(kind, '__name__', kind)}") from None
    raise ConfigError(f"{where}: unsupported field type {kind}")


def set_key(config: RunConfig, key: str, value: str, where: str = "<override>") -> None:
    sections = _sections()
    section, dot, name = key.partition(".")
    if not dot:
        if section not in sections or dataclasses.is_dataclass(sections[section]):
            raise ConfigError(f"{where}: unknown key {key!r}")
        setattr(config, section, _parse(value, sections[section], where))
        return
    if section not in sections or not dataclasses.is_dataclass(sections[section]):
        raise ConfigError(f"{where}: unknown key {key!r}")
    target = getattr(config, section)
    hints = typing.get_type_hints(type(target))
    if name not in hints:
        raise ConfigError(f"{where}: unknown key {key!r}")
    setattr(target, name, _parse(value, hints[name], where))
