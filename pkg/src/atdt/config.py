"""Experiment configuration: dataclasses with a strict JSON round trip.

Unknown keys anywhere in a config document are rejected, and every field has a
default, so ``{}`` is a valid config equal to the defaults.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .scenegen import STYLE_A, STYLE_B, DomainStyle, GrammarConfig
from .training import TrainConfig

DIRECTIONS = ("dep2sem", "sem2dep")
METHODS = ("atdt", "baseline", "oracle", "multitask")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_train: int = 500
    n_val: int = 100
    n_test: int = 100
    resolution: int = 64
    paired: bool = False
    grammar: GrammarConfig = field(default_factory=GrammarConfig)
    style_a: DomainStyle = STYLE_A
    style_b: DomainStyle = STYLE_B


@dataclass
class ProxyConfig:
    noise_sigma: float = 0.05
    hole_fraction: float = 0.1


def _default_task_train() -> TrainConfig:
    return TrainConfig(steps=1500, batch_size=8, lr=1e-3, eval_every=500)


def _default_transfer_train() -> TrainConfig:
    return TrainConfig(steps=1000, batch_size=8, lr=1e-3, eval_every=500)


@dataclass
class ExperimentPlan:
    name: str = "atdt"
    direction: str = "dep2sem"
    split_level: int = 4
    shared_encoder: bool = True
    use_batchnorm: bool = True
    proxy_labels_on_b: bool = False
    proxy: ProxyConfig = field(default_factory=ProxyConfig)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    methods: list[str] = field(default_factory=lambda: ["atdt", "baseline", "oracle"])
    transfer_loss: str = "mse"
    data: DataConfig = field(default_factory=DataConfig)
    train_task: TrainConfig = field(default_factory=_default_task_train)
    train_transfer: TrainConfig = field(default_factory=_default_transfer_train)
    save_checkpoints: bool = True
    qualitative_samples: int = 4

    def validate(self) -> "ExperimentPlan":
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if self.split_level not in (1, 2, 3, 4):
            raise ConfigError(f"split_level must be 1..4, got {self.split_level}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; choose from {METHODS}")
        if self.transfer_loss not in ("mse", "l2"):
            raise ConfigError("transfer_loss must be 'mse' or 'l2'")
        if not 0.0 <= self.proxy.hole_fraction < 0.5 or self.proxy.noise_sigma < 0:
            raise ConfigError("invalid proxy-label parameters")
        if self.data.resolution % 8 or not 32 <= self.data.resolution <= 128:
            raise ConfigError("resolution must be a multiple of 8 in 32..128")
        if min(self.data.n_train, self.data.n_val, self.data.n_test) < 1:
            raise ConfigError("every split needs at least one sample")
        try:
            self.data.grammar.validate()
            self.train_task.validate(self.use_batchnorm)
            self.train_transfer.validate(self.use_batchnorm)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self


# -------------------------------------------------------------- (de)serialize
def to_dict(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    return obj


def _coerce(tp: Any, value: Any, path: str, default: Any = None) -> Any:
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return from_dict(tp, value, path, default)
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        args = typing.get_args(tp)
        if origin is tuple and args and args[-1] is not Ellipsis:
            if len(args) != len(value):
                raise ConfigError(f"{path}: expected {len(args)} items")
            return tuple(_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
        inner = args[0] if args else Any
        items = [_coerce(inner, v, f"{path}[{i}]") for i, v in enumerate(value)]
        return tuple(items) if origin is tuple else items
    if origin in (typing.Union, types.UnionType):
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    return value


def from_dict(cls: type, data: dict, path: str = "config", base: Any = None) -> Any:
    """Build ``cls`` from ``data``; missing keys fall back to ``base`` (default: ``cls()``)."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    if base is None:
        base = cls()
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            kwargs[f.name] = _coerce(hints[f.name], data[f.name], f"{path}.{f.name}", getattr(base, f.name))
        else:
            kwargs[f.name] = getattr(base, f.name)
    return cls(**kwargs)


def plan_from_dict(data: dict) -> ExperimentPlan:
    return from_dict(ExperimentPlan, data).validate()


def load_plan(path: str | Path) -> ExperimentPlan:
    """Load a config file, or the ``config`` section of a run manifest."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    if "config" in doc and "manifest_version" in doc:
        plan = plan_from_dict(doc["config"])
        plan.seeds = [doc["seed"]]
        return plan
    return plan_from_dict(doc)


def dumps(plan: ExperimentPlan) -> str:
    return json.dumps(to_dict(plan), indent=2, sort_keys=True)
