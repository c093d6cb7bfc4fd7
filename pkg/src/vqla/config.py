"""YAML experiment configs with dotted-path overrides."""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, Iterable

import yaml

from .train import TrainConfig


class ConfigError(ValueError):
    pass


def _coerce(value: Any, default: Any, key: str) -> Any:
    kind = type(default)
    try:
        if kind is bool:
            if isinstance(value, str):
                if value.lower() in ("true", "1", "yes"):
                    return True
                if value.lower() in ("false", "0", "no"):
                    return False
                raise ValueError
            return bool(value)
        if kind is int:
            if isinstance(value, bool):
                raise ValueError
            if isinstance(value, float):
                if not value.is_integer():
                    raise ValueError
                return int(value)
            return int(value)
        if kind is float:
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        if kind is str:
            if not isinstance(value, (str, int, float)):
                raise ValueError
            return str(value)
        if kind is tuple:
            if isinstance(value, str):
                value = [v.strip() for v in value.split(",") if v.strip()]
            if not isinstance(value, (list, tuple)):
                raise ValueError
            return tuple(str(v) for v in value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}") from None
    raise ConfigError(f"{key}: unsupported field type {kind.__name__}")


def _apply(obj: Any, data: dict, prefix: str = "") -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected a mapping")
    fields = {f.name for f in dataclasses.fields(obj)}
    for key, value in data.items():
        path = prefix + str(key)
        if key not in fields:
            while isinstance(value, dict) and len(value) == 1:
                (sub, value), = value.items()
                path += f".{sub}"
            raise ConfigError(f"unknown config key {path!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            _apply(current, value or {}, path + ".")
        else:
            setattr(obj, key, _coerce(value, current, path))


def set_override(config: TrainConfig, key: str, raw: str) -> None:
    """Apply ``key=value`` where ``key`` is a dotted path such as ``train.lr``."""
    parts = key.split(".")
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError:
        value = raw
    nested: Any = value
    for part in reversed(parts):
        nested = {part: nested}
    _apply(config, nested)


def parse_config(path=None, overrides: Iterable[str] = ()) -> TrainConfig:
    """Defaults, then the file, then ``key=value`` overrides; validated."""
    config = TrainConfig()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from None
        _apply(config, data)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        set_override(config, key.strip(), raw)
    try:
        config.validate()
        config.data.synthetic.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return config


def config_to_dict(config) -> dict:
    out = dataclasses.asdict(config)

    def fix(d):
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
            elif isinstance(v, dict):
                fix(v)
        return d

    return fix(out)


def config_from_dict(data: dict) -> TrainConfig:
    config = TrainConfig()
    _apply(config, data)
    return config
