"""Structured run configuration with strict loading.

A config file must list every key of the schema (the shipped
``configs/default.yaml`` is the template); unknown or missing keys raise
:class:`ConfigError` naming the dotted field path.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import yaml

from .data import SyntheticSpec, TransformProfile
from .model import ModelConfig
from .reid import ReidConfig


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass
class TrainConfig:
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 0.0005
    base_lr: float = 0.001
    lr_steps: tuple[int, ...] = (16, 22)
    lr_gamma: float = 0.1
    total_epochs: int = 24
    warmup_steps: int = 300
    warmup_ratio: float = 1.0 / 3.0
    batch_size: int = 4
    w_det: float = 1.0
    w_reid: float = 1.0
    grad_clip: Optional[float] = None
    max_steps: Optional[int] = None
    seed: int = 0
    num_threads: int = 1
    ablation_preset: Optional[str] = None

    def __post_init__(self):
        self.lr_steps = tuple(int(s) for s in self.lr_steps)
        if self.warmup_steps < 0:
            raise ConfigError("train.warmup_steps", "must be >= 0")
        if any(s >= self.total_epochs for s in self.lr_steps):
            raise ConfigError("train.lr_steps", "every decay epoch must precede total_epochs")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size", "must be >= 1")
        if self.optimizer != "sgd":
            raise ConfigError("train.optimizer", "only sgd is supported")


@dataclass
class DataConfig:
    profile: TransformProfile = field(default_factory=TransformProfile)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    n_train: int = 200
    n_test: int = 50
    seed: int = 0


@dataclass
class EvalConfig:
    gallery_size: int = 100
    gallery_sizes: tuple[int, ...] = (50, 100)
    iou_thresh: float = 0.5


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    reid: ReidConfig = field(default_factory=ReidConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return _to_plain(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def replace(self, **dotted) -> "Config":
        """Copy with overrides given as ``{"train.seed": 3, ...}`` (use ``__`` for dots in kwargs)."""
        d = self.to_dict()
        for key, value in dotted.items():
            set_dotted(d, key.replace("__", "."), value)
        return config_from_dict(d)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(v) for v in obj]
    return obj


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    cur = d
    for p in parts[:-1]:
        if p not in cur or not isinstance(cur[p], dict):
            raise ConfigError(key, "unknown config section")
        cur = cur[p]
    if parts[-1] not in cur:
        raise ConfigError(key, "unknown config key")
    cur[parts[-1]] = value


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if origin is typing.Union:
        if value is None:
            if type(None) in args:
                return None
            raise ConfigError(path, "may not be null")
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, path)
    if value is None:
        raise ConfigError(path, "may not be null")
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(path, f"expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    return value


def _build(cls, d, path: str):
    if not isinstance(d, dict):
        raise ConfigError(path, f"expected a mapping, got {type(d).__name__}")
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls)]
    unknown = sorted(set(d) - set(names))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}" if path else unknown[0], "unknown config key")
    kwargs = {}
    for name in names:
        sub = f"{path}.{name}" if path else name
        if name not in d:
            raise ConfigError(sub, "missing required config field")
        kwargs[name] = _coerce(hints[name], d[name], sub)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(path, str(exc)) from exc


def config_from_dict(d: dict) -> Config:
    return _build(Config, d, "")


def load_config(path) -> Config:
    with open(path) as fh:
        d = yaml.safe_load(fh)
    return config_from_dict(d)


def shipped_config(name: str = "default") -> Config:
    """``default`` holds the paper's settings; ``desk`` the CPU-scale profile."""
    text = resources.files("alignps").joinpath("configs", f"{name}.yaml").read_text()
    return config_from_dict(yaml.safe_load(text))


def dump_config(cfg: Config, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
