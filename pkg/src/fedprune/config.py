"""Experiment configuration: a versioned YAML tree.

Example::

    version: 1
    method: fedpruning
    rounds: 40
    epochs: 6
    seeds: [1, 2, 3]
    data:
      synthetic: {num_silos: 9, label_shift: 6.0}
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .data import CsvSchema, SyntheticConfig
from .errors import ConfigError
from .schedule import DEFAULT_ROUNDS, PruneSchedule, default_schedules

CONFIG_VERSION = 1

METHODS = ("centralized", "local_only", "fedavg", "fedpruning", "fedpruning_lt", "one_shot", "one_shot_lt")
FEDERATED = ("fedavg", "fedpruning", "fedpruning_lt", "one_shot", "one_shot_lt")
METHOD_VARIANT = {
    "fedavg": "none",
    "fedpruning": "iterative",
    "fedpruning_lt": "iterative_lt",
    "one_shot": "one_shot",
    "one_shot_lt": "one_shot_lt",
}

# Reference settings per method (rounds, local epochs, learning rate
# per decay phase, pruning rate, target sparsity).
REPORTED_SETTINGS = {
    "centralized": dict(rounds=1, epochs=300, lr=(5e-5, 1e-5, 0.2e-6), rate=0.0, target=0.0),
    "local_only": dict(rounds=1, epochs=300, lr=(2e-5, 4e-6, 8e-7), rate=0.0, target=0.0),
    "fedavg": dict(rounds=40, epochs=5, lr=(2e-5, 4e-6, 8e-7), rate=0.0, target=0.0),
    "fedpruning": dict(rounds=40, epochs=6, lr=(2e-5, 4e-6, 8e-7), rate=0.25, target=0.80),
    "fedpruning_lt": dict(rounds=40, epochs=8, lr=(2e-5, 2e-6, 4e-7), rate=0.415, target=0.80),
    "one_shot": dict(rounds=40, epochs=5, lr=(2e-5, 4e-6, 8e-7), rate=0.70, target=0.70),
    "one_shot_lt": dict(rounds=40, epochs=5, lr=(1e-5, 2e-6, 4e-7), rate=0.70, target=0.70),
}

# Desk-scale learning rates: the reported per-phase ratios, with a larger base
# step because the synthetic model and data are far smaller.
DESK_LR_SCALE = 300.0
# Single-round baselines decay at these epochs instead of rounds.
BASELINE_DECAY_EPOCHS = (100, 200)


def default_lr(method: str) -> tuple[float, ...]:
    return tuple(v * DESK_LR_SCALE for v in REPORTED_SETTINGS[method]["lr"])


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "fedpruning"
    rounds: int | None = None  # None: the method's reported setting
    epochs: int | None = None
    recovery_epochs: int | None = None  # None: same as epochs
    batch_size: int = 64
    lr: tuple[float, ...] | None = None  # one value per decay phase
    decay_rounds: tuple[int, ...] = (5, 10)
    weight_decay: float = 1e-4
    patience: int | None = 3
    schedule: dict = field(default_factory=dict)  # PruneSchedule field overrides
    synthetic: SyntheticConfig | None = field(default_factory=SyntheticConfig)
    csv_path: str | None = None
    csv_schema: CsvSchema = field(default_factory=CsvSchema)
    oversample: bool = True
    hidden: tuple[int, ...] = (64, 32)
    conv_channels: int = 4
    kernel: int = 3
    stride: int = 2
    sample_weighted: bool = False  # FedAvg weighting by sample count
    seeds: tuple[int, ...] = (1,)
    out_dir: str = "results"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.rounds is not None and self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        for name in ("epochs", "recovery_epochs"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if (self.synthetic is None) == (self.csv_path is None):
            raise ConfigError("data source must be exactly one of synthetic or csv")
        if self.lr is not None and (not self.lr or min(self.lr) <= 0):
            raise ConfigError("learning rates must be positive")
        unknown = set(self.schedule) - {f.name for f in dataclasses.fields(PruneSchedule)}
        if unknown:
            raise ConfigError(f"unknown schedule keys {sorted(unknown)}")
        self.prune_schedule()  # validates overrides

    @property
    def federated(self) -> bool:
        return self.method in FEDERATED

    @property
    def n_rounds(self) -> int:
        if not self.federated:
            return 1
        return self.rounds if self.rounds is not None else REPORTED_SETTINGS[self.method]["rounds"]

    @property
    def n_epochs(self) -> int:
        return self.epochs if self.epochs is not None else REPORTED_SETTINGS[self.method]["epochs"]

    @property
    def n_recovery_epochs(self) -> int:
        return self.recovery_epochs if self.recovery_epochs is not None else self.n_epochs

    @property
    def lr_values(self) -> tuple[float, ...]:
        return tuple(self.lr) if self.lr is not None else default_lr(self.method)

    @property
    def lr_decay_points(self) -> tuple[int, ...]:
        return tuple(self.decay_rounds) if self.federated else BASELINE_DECAY_EPOCHS

    def prune_schedule(self) -> PruneSchedule:
        if not self.federated:
            return default_schedules()["none"]
        base = default_schedules()[METHOD_VARIANT[self.method]]
        try:
            return base.with_overrides(**self.schedule)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    # -- serialisation --

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"version": CONFIG_VERSION}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name in ("synthetic", "csv_path", "csv_schema"):
                continue
            d[f.name] = list(v) if isinstance(v, tuple) else (dict(v) if isinstance(v, dict) else v)
        if self.synthetic is not None:
            syn = dataclasses.asdict(self.synthetic)
            syn["groups"] = [dict(g) for g in self.synthetic.groups]
            syn["samples_range"] = list(syn["samples_range"])
            syn["years"] = list(syn["years"])
            d["data"] = {"synthetic": syn}
        else:
            schema = dataclasses.asdict(self.csv_schema)
            if schema["feature_cols"] is not None:
                schema["feature_cols"] = list(schema["feature_cols"])
            d["data"] = {"csv": {"path": self.csv_path, "schema": schema}}
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        d = dict(d)
        version = d.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version}")
        data = d.pop("data", {"synthetic": {}}) or {"synthetic": {}}
        known = {f.name for f in dataclasses.fields(cls)} - {"synthetic", "csv_path", "csv_schema"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        kw: dict[str, Any] = {}
        for k, v in d.items():
            kw[k] = tuple(v) if isinstance(v, list) else v
        if not isinstance(data, dict) or len(data) != 1 or next(iter(data)) not in ("synthetic", "csv"):
            raise ConfigError("data must hold exactly one of 'synthetic' or 'csv'")
        try:
            if "synthetic" in data:
                syn = dict(data["synthetic"] or {})
                for key in ("samples_range", "years"):
                    if key in syn:
                        syn[key] = tuple(syn[key])
                if "groups" in syn:
                    syn["groups"] = tuple(dict(g) for g in syn["groups"])
                kw["synthetic"] = SyntheticConfig(**syn)
            else:
                csv_cfg = dict(data["csv"] or {})
                if "path" not in csv_cfg:
                    raise ConfigError("csv data source needs a path")
                extra = set(csv_cfg) - {"path", "schema"}
                if extra:
                    raise ConfigError(f"unknown csv keys: {', '.join(sorted(extra))} (schema fields go under 'schema')")
                schema = dict(csv_cfg.get("schema") or {})
                if schema.get("feature_cols") is not None:
                    schema["feature_cols"] = tuple(schema["feature_cols"])
                kw["synthetic"] = None
                kw["csv_path"] = str(csv_cfg["path"])
                kw["csv_schema"] = CsvSchema(**schema)
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        try:
            d = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config is not valid YAML: {exc}") from exc
        return cls.from_dict(d or {})

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_yaml(text)
