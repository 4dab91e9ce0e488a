"""Experiment configuration: defaults, validation and JSON round-tripping."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

ABLATION_MODES = ("supervised", "st", "st_sample", "full")

# arm name -> row label of the ablation table
ARM_LABELS = {
    "supervised": "U-net",
    "st": "Self-Training",
    "st_sample": "ST+sample-level",
    "full": "ST+sample-pixel-level",
}


class ConfigError(ValueError):
    pass


@dataclass
class TrainPhaseConfig:
    epochs: int
    batch_size: int
    labeled_per_batch: int
    learning_rate: float
    seed: int
    momentum: float = 0.9
    weight_decay: float = 1e-4
    stream: int = 0

    def __post_init__(self):
        if not 0 < self.labeled_per_batch <= self.batch_size:
            raise ConfigError(
                f"labeled_per_batch must be in (0, batch_size={self.batch_size}], got {self.labeled_per_batch}"
            )
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")


@dataclass
class ExperimentConfig:
    dataset: str = "data"
    crop_size: int = 64
    n_classes: int = 4
    depth: int = 4
    base_channels: int = 16
    instance_norm: bool = True
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    pretrain_epochs: int = 40
    stage1_epochs: int = 40
    stage2_epochs: int = 40
    batch_size: int = 8
    labeled_per_batch: int = 4
    K: int = 5
    partition_fraction: float = 0.5
    unsup_weight: float = 1.0
    ablation_mode: str = "full"
    seed: int = 0
    include_background_in_dice: bool = True
    refresh_every_epoch: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            expected = {"int": int, "float": (int, float), "bool": bool, "str": str}[f.type]
            if isinstance(value, bool) and f.type != "bool":
                raise ConfigError(f"{f.name}: expected {f.type}, got bool")
            if not isinstance(value, expected):
                raise ConfigError(f"{f.name}: expected {f.type}, got {type(value).__name__}")
        positive = ("crop_size", "pretrain_epochs", "batch_size", "labeled_per_batch")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("stage1_epochs", "stage2_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.depth < 2:
            raise ConfigError("depth must be >= 2")
        if self.base_channels < 4:
            raise ConfigError("base_channels must be >= 4")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.crop_size % 2 ** (self.depth - 1):
            raise ConfigError(f"crop_size {self.crop_size} must be divisible by {2 ** (self.depth - 1)}")
        if not 0 < self.learning_rate:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.labeled_per_batch > self.batch_size:
            raise ConfigError("labeled_per_batch must not exceed batch_size")
        if self.K < 2:
            raise ConfigError("K must be >= 2")
        if self.pretrain_epochs < self.K:
            raise ConfigError(f"pretrain_epochs ({self.pretrain_epochs}) must be >= K ({self.K})")
        if not 0 < self.partition_fraction < 1:
            raise ConfigError("partition_fraction must be in (0, 1)")
        if self.unsup_weight < 0:
            raise ConfigError("unsup_weight must be >= 0")
        if self.ablation_mode not in ABLATION_MODES:
            raise ConfigError(f"ablation_mode must be one of {ABLATION_MODES}")

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**obj)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            obj = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(obj, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(obj)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def phase(self, epochs: int, tag: int) -> TrainPhaseConfig:
        return TrainPhaseConfig(epochs, self.batch_size, self.labeled_per_batch, self.learning_rate,
                                self.seed, self.momentum, self.weight_decay, tag)
