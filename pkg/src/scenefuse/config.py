"""Run configuration: nested frozen dataclasses stored as JSON.

The file is the single source of hyperparameters. ``config_hash`` digests
the canonical JSON form, so two configs with equal values hash equally
whatever their key order on disk.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from scenefuse.aggregate import AggregationConfig
from scenefuse.attention import BlockConfig
from scenefuse.decoder import DecoderConfig
from scenefuse.fusion import EncoderConfig
from scenefuse.metrics import MetricsConfig
from scenefuse.model import ModelConfig
from scenefuse.objective import TrainConfig
from scenefuse.synthdata import GeneratorConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    train_scenes: int = 5000
    eval_scenes: int = 500
    task: str = "unimodal"          # or "bimodal"
    eval_offset: int = 1_000_000    # scene index where the held-out stream starts

    def __post_init__(self):
        if self.train_scenes < 1 or self.eval_scenes < 1:
            raise ValueError("scene counts must be >= 1")
        if self.task not in ("unimodal", "bimodal"):
            raise ValueError(f"task must be 'unimodal' or 'bimodal', got {self.task!r}")


@dataclass(frozen=True)
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(
        encoder=EncoderConfig(block=BlockConfig(64, 4, 128)),
        decoder=DecoderConfig(modes=6, horizon=8, trajectory_scale=10.0)))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=1e-3, batch_size=64))
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    dtype: str = "float32"

    def __post_init__(self):
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.model.decoder.horizon != self.generator.future:
            raise ValueError(f"decoder horizon {self.model.decoder.horizon} differs from "
                             f"generated future length {self.generator.future}")


# ----------------------------------------------------------------------------
# dict <-> dataclass


def to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(x) for x in obj]
    return obj


def _convert(tp, value, where: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _convert(args[0], value, where)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        return from_dict(tp, value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, f"{where}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{where}: expected {len(args)} items, got {len(value)}")
        return tuple(_convert(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, data: dict, where: str = "config"):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {k: _convert(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def dumps(cfg: RunConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"


def loads(text: str) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return from_dict(RunConfig, data)


def load(path) -> RunConfig:
    return loads(Path(path).read_text())


def save(cfg: RunConfig, path) -> None:
    Path(path).write_text(dumps(cfg))


def config_hash(cfg) -> str:
    canon = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]
