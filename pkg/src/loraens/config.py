"""Flat, versioned JSON run configuration.

One namespace holds every model, training and dataset field plus the run seed,
output directory and member parallelism.  Unknown keys are rejected, and a
resolved config round-trips through JSON without loss.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .adapters import ConfigError
from .backbone import ModelConfig
from .data import SyntheticSpec
from .training import TrainConfig

SCHEMA_VERSION = 1

# Dataset fields shared with the model are taken from the model config.
_SHARED_DATA = ("num_classes", "image_size", "channels")
_MODEL_KEYS = tuple(f.name for f in fields(ModelConfig))
_TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))
_DATA_KEYS = tuple(f.name for f in fields(SyntheticSpec) if f.name not in _SHARED_DATA)
_RUN_KEYS = ("seed", "out_dir", "jobs", "train_data", "test_data", "ood_data")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    seed: int = 0
    out_dir: str = "runs/default"
    jobs: int = 1
    train_data: str | None = None  # LDS1 paths; None means generate synthetic splits
    test_data: str | None = None
    ood_data: str | None = None

    def __post_init__(self):
        self.model.validate()
        self.train.validate()
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        for name in _SHARED_DATA:
            setattr(self.data, name, getattr(self.model, name))

    def to_dict(self) -> dict:
        out = {"schema_version": SCHEMA_VERSION}
        for k in _RUN_KEYS:
            out[k] = getattr(self, k)
        for k in _MODEL_KEYS:
            out[k] = getattr(self.model, k)
        for k in _TRAIN_KEYS:
            out[k] = getattr(self.train, k)
        for k in _DATA_KEYS:
            out[k] = getattr(self.data, k)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        d = dict(d)
        version = d.pop("schema_version", None)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
        known = set(_RUN_KEYS) | set(_MODEL_KEYS) | set(_TRAIN_KEYS) | set(_DATA_KEYS)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            model = ModelConfig(**{k: d[k] for k in _MODEL_KEYS if k in d})
            train = TrainConfig(**{k: d[k] for k in _TRAIN_KEYS if k in d})
            spec = {k: d[k] for k in _DATA_KEYS if k in d}
            spec.update({k: getattr(model, k) for k in _SHARED_DATA})
            data = SyntheticSpec(**spec)
            run = {k: d[k] for k in _RUN_KEYS if k in d}
            return cls(model=model, train=train, data=data, **run)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_json(text)

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.to_json())
        tmp.replace(path)

    def with_overrides(self, **kw) -> "RunConfig":
        """New config with flat-namespace overrides applied (``None`` values ignored)."""
        d = self.to_dict()
        d.update({k: v for k, v in kw.items() if v is not None})
        return RunConfig.from_dict(d)
