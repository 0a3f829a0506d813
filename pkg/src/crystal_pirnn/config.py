"""Declarative run configuration: presets, YAML loading and validation."""
from __future__ import annotations

import copy
import dataclasses
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .datagen import SCHEMES, ConditionRanges, SeedState
from .errors import ValidationError
from .evaluate import StudyConfig
from .model import ModelConfig
from .pbm import PhysicalConstants
from .train import TrainConfig

PRESETS_NAMES = ("desk", "paper")


@dataclass(frozen=True)
class DatasetSection:
    """Corpus generation settings (defaults reproduce the 100-run design)."""

    n_runs: int = 100
    noise: float = 0.0
    shift: float = 0.0
    scheme: str = "full"
    seed: int = 0
    dt: float = 1.0
    ranges: ConditionRanges = field(default_factory=ConditionRanges)
    constants: PhysicalConstants = field(default_factory=PhysicalConstants)
    seed_state: SeedState = field(default_factory=SeedState)

    def __post_init__(self):
        if self.n_runs < 3:
            raise ValidationError("n_runs must be at least 3 for a train/val/test split")
        if self.noise < 0:
            raise ValidationError("noise must be non-negative")
        if not -1.0 < self.shift < 1.0:
            raise ValidationError("shift must lie in (-1, 1)")
        if self.scheme not in SCHEMES:
            raise ValidationError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if not self.dt > 0:
            raise ValidationError("dt must be positive")


@dataclass(frozen=True)
class IOSection:
    data_dir: str = "data"
    run_dir: str = "runs"
    study_dir: str = "studies"


@dataclass(frozen=True)
class RootConfig:
    """Complete configuration; ``study.n_seeds`` is also the ensemble size of ``train``."""

    preset: str = "paper"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    study: StudyConfig = field(default_factory=StudyConfig)
    io: IOSection = field(default_factory=IOSection)

    def __post_init__(self):
        if self.preset not in PRESETS_NAMES:
            raise ValidationError(f"unknown preset {self.preset!r}; expected desk or paper")

    def to_dict(self) -> dict[str, Any]:
        return _plain(asdict(self))

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


# Training recipe shared by both presets.  The kinetic coordinates are
# centred on the reference magnitudes and refit by Gauss-Newton; the
# network is trained without dropout or batch normalisation because both
# slowed convergence of the trajectory fit at the affordable budgets.
_RECIPE = {
    "model": {"param_coordinates": "centered", "dropout": 0.0, "batchnorm": False},
    "train": {"base_lr": 3e-3, "grad_clip": 1.0, "time_scale": 500.0,
              "param_optimizer": "gauss_newton", "gn_max_nfev": 10},
}

PRESETS: dict[str, dict[str, Any]] = {
    "desk": {
        "dataset": {"dt": 5.0},
        "model": dict(_RECIPE["model"]),
        "train": dict(_RECIPE["train"], epochs=300),
        "study": {"dt": 5.0, "n_seeds": 3, "train_sizes": [5, 10, 20],
                  "lambdas": [0.0, 1.0, 1e3], "noise_levels": [0.0, 0.3],
                  "sampling_lambdas": [0.0, 1e4]},
    },
    "paper": {
        "dataset": {"dt": 1.0},
        "model": dict(_RECIPE["model"]),
        "train": dict(_RECIPE["train"], epochs=2000),
        "study": {"dt": 1.0, "n_seeds": 5},
    },
}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def deep_merge(base: Mapping[str, Any], over: Mapping[str, Any]) -> dict[str, Any]:
    out = copy.deepcopy(dict(base))
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _build(cls, data: Any, where: str):
    """Instantiate dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, Mapping):
        raise ValidationError(f"{where}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ValidationError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        tp = hints[name]
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, value, f"{where}.{name}")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ValidationError(f"{where}: {exc}") from exc


def build_config(data: Mapping[str, Any] | None = None, preset: str | None = None,
                 overrides: Mapping[str, Any] | None = None) -> RootConfig:
    """Expand the preset, merge file values, then overrides, and validate.

    The preset is taken from ``preset`` if given, else from ``data``, else
    ``paper``.  Later layers win.
    """
    data = dict(data or {})
    name = preset or data.get("preset") or "paper"
    if name not in PRESETS:
        raise ValidationError(f"unknown preset {name!r}; expected desk or paper")
    merged = deep_merge(PRESETS[name], data)
    merged = deep_merge(merged, overrides or {})
    merged["preset"] = name
    return _build(RootConfig, merged, "config")


def load_config(path: str | Path | None = None, preset: str | None = None,
                overrides: Mapping[str, Any] | None = None) -> RootConfig:
    data: dict[str, Any] = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ValidationError(f"{path}: invalid YAML: {exc}") from exc
        if not isinstance(data, dict):
            raise ValidationError(f"{path}: top level must be a mapping")
    return build_config(data, preset, overrides)
