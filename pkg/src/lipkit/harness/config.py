"""Strict JSON experiment configuration with field-path error reporting."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from ..datapipe import DataConfig
from ..model import ModelConfig
from ..recipe import RecipeConfig


class ConfigError(ValueError):
    """Schema violation; the message starts with the offending field path."""


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    recipe: RecipeConfig = field(default_factory=RecipeConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> None:
        for name in ("model", "recipe", "data"):
            try:
                getattr(self, name).validate()
            except ValueError as e:
                msg = str(e)
                raise ConfigError(msg if msg.startswith(f"{name}.") else f"{name}: {msg}") from e

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def digest(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _coerce(value, tp, path: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if origin is list:
        (inner,) = typing.get_args(tp)
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        return [_coerce(v, inner, f"{path}[{i}]") for i, v in enumerate(value)]
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(f"{path}: expected a list of {len(args)} values")
        return tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported field type {tp}")


def _build(cls, doc, path: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in doc:
        if key not in names:
            raise ConfigError(f"{path + '.' if path else ''}{key}: unknown field")
    kwargs = {k: _coerce(v, hints[k], f"{path + '.' if path else ''}{k}") for k, v in doc.items()}
    return cls(**kwargs)


def config_from_dict(doc: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, doc, "")
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return config_from_dict(doc)


def with_overrides(cfg: ExperimentConfig, deltas: dict) -> ExperimentConfig:
    """Copy of ``cfg`` with dotted-path overrides such as ``{"recipe.mixup": True}``."""
    doc = copy.deepcopy(cfg.to_dict())
    for dotted, value in deltas.items():
        node = doc
        *parents, leaf = dotted.split(".")
        for p in parents:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"{dotted}: unknown field")
            node = node[p]
        if leaf not in node:
            raise ConfigError(f"{dotted}: unknown field")
        node[leaf] = value
    return config_from_dict(doc)
