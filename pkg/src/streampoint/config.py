"""Flat ``key=value`` configuration files with ``#`` comments."""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path
from typing import Iterable

from streampoint.errors import FormatError, InvalidInputError
from streampoint.model import ModelConfig
from streampoint.trainer import PRESETS, TrainConfig


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise FormatError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def _coerce(value: str, typ, key: str):
    try:
        if typ is bool:
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if typ is int:
            return int(value)
        if typ is float:
            return float(value)
        if typing.get_origin(typ) is tuple:
            return tuple(float(v) for v in value.split(","))
    except ValueError as exc:
        raise InvalidInputError(f"{key}: cannot parse {value!r} as {getattr(typ, '__name__', typ)}") from exc
    return value


def _field_types(cls) -> dict[str, type]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def train_config_from_kv(pairs: dict[str, str]) -> TrainConfig:
    """Build a :class:`TrainConfig`; ``preset`` seeds defaults, ``model.*`` keys fill the model config."""
    pairs = dict(pairs)
    base: dict = {}
    name = pairs.pop("preset", None)
    if name is not None:
        if name not in PRESETS:
            raise InvalidInputError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        base.update(PRESETS[name])
    train_types = _field_types(TrainConfig)
    model_types = _field_types(ModelConfig)
    model_kw: dict = {}
    for key, value in pairs.items():
        if key.startswith("model."):
            sub = key[len("model."):]
            if sub not in model_types:
                raise InvalidInputError(f"unknown model option {sub!r}")
            model_kw[sub] = _coerce(value, model_types[sub], key)
        elif key in train_types and key != "model":
            base[key] = _coerce(value, train_types[key], key)
        else:
            raise InvalidInputError(f"unknown training option {key!r}")
    base["model"] = ModelConfig(**model_kw)
    return TrainConfig(**base)


def load_train_config(path=None, overrides: Iterable[str] = ()) -> TrainConfig:
    """Read ``path`` (optional) then apply ``key=value`` overrides in order."""
    pairs: dict[str, str] = {}
    if path is not None:
        path = Path(path)
        try:
            pairs.update(parse_kv(path.read_text(), str(path)))
        except FileNotFoundError as exc:
            raise FormatError(f"{path}: config file not found") from exc
    for item in overrides:
        pairs.update(parse_kv(item, "--set"))
    return train_config_from_kv(pairs)


def dump_kv(cfg: TrainConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        if key == "model":
            lines.extend(f"model.{k}={v}" for k, v in value.items())
        elif isinstance(value, list):
            lines.append(f"{key}={','.join(str(v) for v in value)}")
        else:
            lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
