"""Declarative experiment configuration, loaded from JSON.

Unknown keys anywhere in the document are rejected so that a typo in a sweep
file cannot silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, get_type_hints

from .data import PUBLIC_MODES
from .filtering import EMPTY_SET_CONVENTIONS
from .models import LR_SCHEDULES, MODEL_KINDS
from .selection import SELECTION_KINDS

DEFAULT_GAMMAS = (0.001, 0.2, 0.4, 0.6, 0.8, 1.0)


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class TaskConfig:
    generator: str = "synthetic"
    num_clients: int = 20
    dim: int = 5
    target: str = "regression"
    classes: int = 2
    per_client_size: int = 50
    heterogeneity: float = 0.5
    noise: float = 0.1
    signal_scale: float = 1.0
    source_size: int = 5000
    alpha: float = 0.5
    public_mode: str = "fresh"
    public_size: int | None = 100
    public_fraction: float | None = None
    public_path: str | None = None
    public_skip_header: bool = False
    test_size: int = 500


@dataclass
class ModelConfig:
    kind: str = "linear-regression-l2"
    l2: float = 0.01
    hidden_units: int = 8


@dataclass
class TrainConfig:
    rounds: int = 50
    epochs: int = 1
    batch_size: int = 16
    learning_rate: float = 0.05
    lr_schedule: str = "constant"
    lr_decay: float = 1.0
    decay_interval_rounds: int = 1
    lr_offset: float = 0.0
    proximal_mu: float = 0.0


@dataclass
class FederationConfig:
    available: int = 10
    resample_period: int = 5
    K: int = 3
    h: int = 5
    filter_mode: str = "R"
    selection: str = "rs-weighted-replacement"
    poc_d: int | None = None
    empty_set: str = "global"
    client_models: str = "latest"
    parallel_workers: int = 1


@dataclass
class DiagnosticsConfig:
    delta_gap: bool = False
    opt_ratio: bool = False
    reward_C: float | None = None
    submod_check: bool = False
    submod_samples: int = 100
    submod_rounds: int = 5
    gammas: list[float] = field(default_factory=lambda: list(DEFAULT_GAMMAS))
    wall_clock: bool = False
    plots: bool = False


@dataclass
class ExperimentConfig:
    seed: int = 0
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)

    def validate(self) -> ExperimentConfig:
        _validate(self)
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **sections: dict) -> ExperimentConfig:
        """Copy with some keys of some sections overridden, e.g. ``replace(federation={"h": 1})``."""
        data = self.to_dict()
        for name, values in sections.items():
            if isinstance(values, dict):
                data[name].update(values)
            else:
                data[name] = values
        return config_from_dict(data)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(data: dict) -> str:
    """SHA-256 of the canonical (key-sorted) JSON encoding."""
    blob = json.dumps(data, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _coerce(path: str, value: Any, hint: Any) -> Any:
    text = str(hint)
    optional = "None" in text
    if value is None:
        if optional:
            return None
        raise ConfigError(path, "must not be null")
    if "bool" in text:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if "list" in text:
        if not isinstance(value, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
        ):
            raise ConfigError(path, "expected a list of numbers")
        return [float(v) for v in value]
    if "int" in text and "float" not in text:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if "float" in text:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if "str" in text:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    return value


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(path or "<root>", "expected an object")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}" if path else unknown[0], "unknown key")
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, sub)
        else:
            kwargs[name] = _coerce(sub, value, hint)
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "").validate()


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(str(path), "file not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"invalid JSON ({exc})") from None
    return config_from_dict(data)


def _require(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ConfigError(path, message)


def _one_of(value: str, choices, path: str) -> None:
    _require(value in choices, path, f"must be one of {list(choices)}, got {value!r}")


def _validate(cfg: ExperimentConfig) -> None:
    _require(0 <= cfg.seed < 2**64, "seed", "must be an unsigned 64-bit integer")
    t = cfg.task
    _one_of(t.generator, ("synthetic", "dirichlet"), "task.generator")
    _one_of(t.target, ("regression", "classification"), "task.target")
    _one_of(t.public_mode, ("fresh",) + PUBLIC_MODES, "task.public_mode")
    for name in ("num_clients", "dim", "per_client_size", "source_size", "test_size"):
        _require(getattr(t, name) >= 1, f"task.{name}", "must be >= 1")
    _require(t.classes >= 2, "task.classes", "must be >= 2")
    _require(t.heterogeneity >= 0, "task.heterogeneity", "must be >= 0")
    _require(t.noise >= 0, "task.noise", "must be >= 0")
    _require(t.alpha > 0, "task.alpha", "must be > 0")
    if t.generator == "dirichlet":
        _require(t.target == "classification", "task.target", "dirichlet partitioning needs classification")
        _require(t.public_mode != "per-client-slice" or t.public_fraction is not None,
                 "task.public_fraction", "required for per-client-slice")
    if t.public_mode == "fresh":
        _require(t.public_size is not None and t.public_size >= 1, "task.public_size", "must be >= 1")
    if t.public_mode == "held-out-global":
        _require(t.generator == "dirichlet", "task.public_mode", "held-out-global needs the dirichlet generator")
        _require(t.public_fraction is not None or t.public_size is not None, "task.public_fraction",
                 "give a fraction or a size")
    if t.public_mode == "per-client-slice":
        _require(t.public_fraction is not None, "task.public_fraction", "required for per-client-slice")
    if t.public_fraction is not None:
        _require(0 < t.public_fraction < 1, "task.public_fraction", "must be in (0, 1)")
    if t.public_mode == "external":
        _require(bool(t.public_path), "task.public_path", "required for external public data")

    m = cfg.model
    _one_of(m.kind, MODEL_KINDS, "model.kind")
    _require(m.l2 >= 0, "model.l2", "must be >= 0")
    _require(m.hidden_units >= 1, "model.hidden_units", "must be >= 1")
    if m.kind == "linear-regression-l2":
        _require(t.target == "regression", "model.kind", "linear regression needs a regression task")
    else:
        _require(t.target == "classification", "model.kind", f"{m.kind} needs a classification task")

    tr = cfg.train
    _require(tr.rounds >= 1, "train.rounds", "must be >= 1")
    _require(tr.epochs >= 1, "train.epochs", "must be >= 1")
    _require(tr.batch_size >= 1, "train.batch_size", "must be >= 1")
    _require(tr.learning_rate > 0, "train.learning_rate", "must be > 0")
    _one_of(tr.lr_schedule, LR_SCHEDULES, "train.lr_schedule")
    _require(tr.lr_decay > 0, "train.lr_decay", "must be > 0")
    _require(tr.decay_interval_rounds >= 1, "train.decay_interval_rounds", "must be >= 1")
    _require(tr.lr_offset >= 0, "train.lr_offset", "must be >= 0")
    _require(tr.proximal_mu >= 0, "train.proximal_mu", "must be >= 0")

    f = cfg.federation
    _require(1 <= f.available <= t.num_clients, "federation.available", "must be in [1, task.num_clients]")
    _require(f.resample_period >= 1, "federation.resample_period", "must be >= 1")
    _require(f.K >= 1, "federation.K", "must be >= 1")
    _require(f.h >= 1, "federation.h", "must be >= 1")
    _one_of(f.filter_mode, ("off", "D", "R"), "federation.filter_mode")
    _one_of(f.selection, SELECTION_KINDS, "federation.selection")
    if f.poc_d is not None:
        _require(f.poc_d >= f.K, "federation.poc_d", "must be >= K")
    _one_of(f.empty_set, EMPTY_SET_CONVENTIONS, "federation.empty_set")
    _one_of(f.client_models, ("latest", "virtual-step"), "federation.client_models")
    _require(f.parallel_workers >= 1, "federation.parallel_workers", "must be >= 1")

    d = cfg.diagnostics
    _require(d.submod_samples >= 1, "diagnostics.submod_samples", "must be >= 1")
    _require(d.submod_rounds >= 1, "diagnostics.submod_rounds", "must be >= 1")
    _require(all(0 < g <= 1 for g in d.gammas) and len(d.gammas) > 0, "diagnostics.gammas",
             "must be a non-empty list of values in (0, 1]")
    if d.opt_ratio:
        _require(f.available <= 20, "federation.available", "opt_ratio needs at most 20 available clients")
    if d.submod_check:
        _require(f.available >= 2, "federation.available", "submod_check needs at least 2 available clients")
