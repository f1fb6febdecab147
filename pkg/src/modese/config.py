"""Run configuration: one YAML file, overridable by ``section.key=value`` pairs.

Example file::

    stft:
      frame_len: 512
      hop: 256
    model:
      m: 5
      hidden: [512, 512, 512]
    train:
      epochs: 10
      joint_epochs: 10
    enhance:
      strategy: top1

Unlisted keys keep their defaults.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from modese.dsp import StftConfig
from modese.errors import ConfigError
from modese.mode import STRATEGIES, feature_hash


@dataclass
class ModelSection:
    m: int = 5
    context: int = 4
    hidden: list[int] = field(default_factory=lambda: [512, 512, 512])
    gate_hidden: list[int] | None = None
    batchnorm: bool = True


@dataclass
class TrainSection:
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 10  # pretraining epochs (gate and experts)
    joint_epochs: int = 10
    joint_lr_factor: float = 0.1
    seed: int = 0


@dataclass
class PretrainSection:
    embedding_dim: int = 16
    hidden: list[int] = field(default_factory=lambda: [256, 64])
    epochs: int = 30
    restarts: int = 10
    max_iters: int = 100


@dataclass
class EnhanceSection:
    beta: float = math.log(10.0)
    gamma: float = 0.5
    strategy: str = "full"


@dataclass
class DataSection:
    snr_db: list[float] = field(default_factory=lambda: [-5.0, 5.0])
    test_snr_db: list[float] = field(default_factory=lambda: [-5.0, 0.0, 5.0, 10.0, 15.0])
    val_fraction: float = 0.1


@dataclass
class PathsSection:
    """Artifact directories; relative paths resolve against the base directory."""

    corpora: str = "corpora"
    models: str = "models"
    reports: str = "reports"


@dataclass
class RunConfig:
    stft: StftConfig = field(default_factory=StftConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    enhance: EnhanceSection = field(default_factory=EnhanceSection)
    data: DataSection = field(default_factory=DataSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def validate(self) -> "RunConfig":
        self.stft.validate()
        if self.model.m < 1 or self.model.context < 0:
            raise ConfigError("model.m must be >= 1 and model.context >= 0")
        if self.enhance.strategy not in STRATEGIES:
            raise ConfigError(f"enhance.strategy must be one of {STRATEGIES}")
        if not self.enhance.beta > 0 or not 0 < self.enhance.gamma <= 1:
            raise ConfigError("enhance.beta must be > 0 and 0 < enhance.gamma <= 1")
        if any(h < 1 for h in self.model.hidden) or not self.model.hidden:
            raise ConfigError("model.hidden must be a non-empty list of positive widths")
        if self.train.batch_size < 1 or self.train.lr <= 0 or self.train.epochs < 0 or self.train.joint_epochs < 0:
            raise ConfigError("train.batch_size and train.lr must be positive, epoch counts >= 0")
        if not 0 < self.data.val_fraction < 1:
            raise ConfigError("data.val_fraction must be in (0, 1)")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def run_hash(self) -> str:
        """Hash of everything that affects artifacts (paths excluded)."""
        d = self.to_dict()
        d.pop("paths")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def feature_hash(self) -> str:
        return feature_hash(self.stft, self.model.context)



_SECTIONS = {"stft": StftConfig, "model": ModelSection, "train": TrainSection, "pretrain": PretrainSection,
             "enhance": EnhanceSection, "data": DataSection, "paths": PathsSection}


def from_dict(raw: dict | None) -> RunConfig:
    raw = raw or {}
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    parts = {}
    for name, cls in _SECTIONS.items():
        section = raw.get(name) or {}
        if not isinstance(section, dict):
            raise ConfigError(f"config section {name!r} must be a mapping")
        known = {f.name for f in fields(cls)}
        bad = set(section) - known
        if bad:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
        try:
            parts[name] = cls(**section)
        except TypeError as exc:
            raise ConfigError(f"bad values in [{name}]: {exc}") from exc
    return RunConfig(**parts).validate()


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars/lists."""
    raw = {k: dict(v or {}) for k, v in (raw or {}).items()}
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        raw.setdefault(section, {})[name] = yaml.safe_load(value)
    return raw


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    return from_dict(apply_overrides(raw, overrides or []))


def dump_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return path
