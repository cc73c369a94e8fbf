"""Flat ``key = value`` run configuration files.

Blank lines and ``#`` comments are ignored. Keys are the fields of
:class:`~metapi.ppo.TrainConfig`, plus an optional ``preset`` naming the base
(``full``, ``scaled`` or ``smoke``) that the remaining keys override. Unknown
keys are rejected by name.
"""
from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .ppo import PRESETS, TrainConfig

_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}
_TRUE = {"true", "yes", "1", "on"}
_FALSE = {"false", "no", "0", "off"}


class ConfigError(ValueError):
    pass


def _convert(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind in ("bool", bool):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if kind in ("int", int):
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r} (expected {kind})") from None


def parse_pairs(lines, source: str = "<config>") -> dict[str, str]:
    pairs: dict[str, str] = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in pairs:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


def build_config(pairs: dict[str, str]) -> TrainConfig:
    pairs = dict(pairs)
    preset = pairs.pop("preset", "full")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    unknown = sorted(set(pairs) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    values = {k: _convert(k, v) for k, v in pairs.items()}
    try:
        return PRESETS[preset](**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path, overrides: list[str] | None = None) -> TrainConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    pairs = parse_pairs(path.read_text().splitlines(), str(path))
    pairs.update(parse_overrides(overrides or []))
    return build_config(pairs)


def parse_overrides(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def dump_config(config: TrainConfig) -> str:
    """Fully resolved snapshot; loading it reproduces ``config`` exactly."""
    lines = ["# resolved run configuration"]
    for f in fields(TrainConfig):
        v = getattr(config, f.name)
        lines.append(f"{f.name} = {repr(v) if isinstance(v, float) else str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
