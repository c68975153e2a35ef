"""Run configuration: model, training and data settings read from INI files.

A config file has up to three sections, ``[model]``, ``[train]`` and
``[data]``, each holding ``key = value`` lines. Tuples are comma separated,
booleans are ``true``/``false``. Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, get_type_hints

from ..mixing import ConfigError
from ..model import ModelConfig


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 3e-4
    weight_decay: float = 5e-2
    warmup_epochs: float = 1.0
    min_lr: float = 1e-6
    betas: tuple[float, ...] = (0.9, 0.999)
    eps: float = 1e-8
    precision: int = 32
    augment: bool = True
    scale_range: tuple[float, ...] = (0.8, 1.2)
    translate: float = 0.1
    # reuse one batch order, mask and augmentation-free view every epoch
    fixed_batches: bool = False
    # stop once train accuracy reaches this value (0 disables)
    stop_at_acc: float = 0.0
    freeze_encoder: bool = False
    eval_batch: int = 64

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.scale_range = tuple(self.scale_range)
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        if len(self.betas) != 2 or len(self.scale_range) != 2:
            raise ConfigError("betas and scale_range take two values")


@dataclass
class DataConfig:
    classes: tuple[str, ...] = ("sphere", "cube", "torus", "cylinder")
    n_points: int = 256
    per_class_train: int = 200
    per_class_test: int = 50
    jitter: float = 0.01
    seed: int = 0

    def __post_init__(self):
        self.classes = tuple(self.classes)


def desk_model(**overrides) -> ModelConfig:
    """Small model used by the desk-scale training runs."""
    base = dict(
        scale_sizes=(256, 128, 64),
        ks=(16, 8, 8),
        width=16,
        heads=4,
        encoder_blocks=(1, 1, 1),
        decoder_blocks=(1, 1, 1),
        lgm_radius=(0.3, 0.3, 0.3),
        num_classes=4,
        pe_hidden=32,
    )
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=desk_model)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def as_dict(self) -> dict[str, dict[str, Any]]:
        return {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}


def pretrain_defaults() -> RunConfig:
    """Masked-reconstruction defaults: 512-point clouds over scales 512/256/128."""
    return RunConfig(
        model=desk_model(scale_sizes=(512, 256, 128)),
        train=TrainConfig(epochs=10, lr=1e-3, batch_size=16),
        data=DataConfig(n_points=512, per_class_train=25, per_class_test=0),
    )


def cls_defaults() -> RunConfig:
    """4-class, 256-point classification with the fine-tuning learning rate."""
    return RunConfig(train=TrainConfig(epochs=50, lr=3e-4))


def paired_pretrain_config(base: RunConfig | None = None) -> RunConfig:
    """Pretraining run feeding the pretrained-vs-scratch comparison.

    Uses the classification model geometry over a separate 100-cloud unlabeled
    corpus (data seed 1) so pretraining never sees the labeled clouds.
    """
    base = base if base is not None else cls_defaults()
    return RunConfig(
        model=base.model,
        train=TrainConfig(epochs=10, lr=1e-3, batch_size=16),
        data=dataclasses.replace(base.data, per_class_train=25, per_class_test=0, seed=1),
    )


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig}


def _parse_value(raw: str, typ, key: str):
    raw = raw.strip()
    origin = getattr(typ, "__origin__", None)
    try:
        if typ is bool:
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError(raw)
            return low == "true"
        if origin is tuple:
            (inner,) = {a for a in typ.__args__ if a is not Ellipsis}
            return tuple(_parse_value(p, inner, key) for p in raw.split(",") if p.strip())
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None


def apply_overrides(cfg: RunConfig, section: str, values: dict[str, str]) -> RunConfig:
    """Return ``cfg`` with string ``values`` parsed into ``section``."""
    if section not in _SECTIONS:
        raise ConfigError(f"unknown config section {section!r}")
    target = getattr(cfg, section)
    hints = get_type_hints(type(target))
    known = {f.name for f in dataclasses.fields(target)}
    parsed = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {section}.{key!r}")
        parsed[key] = _parse_value(raw, hints[key], f"{section}.{key}")
    return dataclasses.replace(cfg, **{section: dataclasses.replace(target, **parsed)})


def load_config(path: str | Path | None, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep key case
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc.message if hasattr(exc, 'message') else exc}") from None
    for section in parser.sections():
        cfg = apply_overrides(cfg, section, dict(parser.items(section)))
    return cfg
