"""Run configuration: one JSON document, unknown keys rejected."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import UNetConfig
from .losses import LossConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 5e-4
    batch_size: int = 8
    patience: int = 20
    monitor: str = "val_best_f1"
    max_epochs: int = 200
    # validation period in iterations; 0 means once per epoch
    eval_every: int = 0
    # None: ceil(len(train set) / batch_size)
    iterations_per_epoch: int | None = None

    def validate(self) -> None:
        # lr == 0 is accepted as a frozen-weights dry run
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError("batch_size, patience and max_epochs must be >= 1")
        if self.eval_every < 0:
            raise ValueError("eval_every must be >= 0")
        if self.monitor != "val_best_f1":
            raise ValueError(f"unsupported monitor {self.monitor!r}")
        if self.iterations_per_epoch is not None and self.iterations_per_epoch < 1:
            raise ValueError("iterations_per_epoch must be >= 1")


@dataclass
class DataConfig:
    train: str | None = None
    val: str | None = None
    patch: list[int] = field(default_factory=lambda: [128, 128, 64])
    eval_patch: list[int] = field(default_factory=lambda: [128, 128, 64])
    overlap: float = 0.5
    # None disables the prefilter
    gaussian_sigma: float | None = 0.8
    flip: bool = True
    rotate: bool = True
    crop: bool = True

    def validate(self) -> None:
        for name in ("patch", "eval_patch"):
            v = getattr(self, name)
            if len(v) != 3 or min(v) < 1:
                raise ValueError(f"{name} must be three positive extents, got {v}")
        if not 0 <= self.overlap <= 0.9:
            raise ValueError("overlap must lie in [0, 0.9]")
        if self.gaussian_sigma is not None and not self.gaussian_sigma > 0:
            raise ValueError("gaussian_sigma must be > 0 or null")


@dataclass
class RunConfig:
    model: UNetConfig = field(default_factory=UNetConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0

    def validate(self) -> "RunConfig":
        for section in (self.model, self.loss, self.train, self.data):
            section.validate()
        d = self.model.divisor
        for name in ("patch", "eval_patch"):
            if any(n % d for n in getattr(self.data, name)):
                raise ValueError(f"data.{name} extents must be divisible by {d}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _section(cls, raw, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    return cls(**raw)


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    unknown = sorted(set(raw) - {"model", "loss", "train", "data", "seed"})
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    try:
        cfg = RunConfig(
            model=_section(UNetConfig, raw.get("model"), "model"),
            loss=_section(LossConfig, raw.get("loss"), "loss"),
            train=_section(TrainConfig, raw.get("train"), "train"),
            data=_section(DataConfig, raw.get("data"), "data"),
            seed=int(raw.get("seed", 0)),
        )
        return cfg.validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return config_from_dict(raw)


def dump_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path
