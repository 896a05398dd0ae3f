"""Plain-text ``key=value`` configuration files."""

from __future__ import annotations

import dataclasses
import types
import typing
from pathlib import Path
from typing import Mapping

from .errors import ConfigError


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_kv(text, str(path))


def _convert(text: str, hint, key: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if text.lower() in ("", "none"):
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(text, inner[0], key)
    if origin is tuple:
        parts = [p.strip() for p in text.split(",") if p.strip()]
        elem = args[0] if args else str
        return tuple(_convert(p, elem, key) for p in parts)
    if origin is dict:
        pairs = {}
        for item in filter(None, (p.strip() for p in text.split(","))):
            k, sep, v = item.partition(":")
            if not sep:
                raise ConfigError(f"{key}: expected a:b pairs, got {item!r}")
            pairs[_convert(k, args[0], key)] = _convert(v, args[1], key)
        return pairs
    try:
        if hint is bool:
            if text.lower() in ("1", "true", "yes"):
                return True
            if text.lower() in ("0", "false", "no"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} as {hint.__name__}") from exc
    return text


def from_mapping(cls, values: Mapping[str, str], prefix: str = "", strict: bool = True):
    """Build dataclass ``cls`` from string values, converting by field annotation.

    Only keys starting with ``prefix`` are considered; unknown keys under the
    prefix raise ConfigError when ``strict``.
    """
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    kwargs = {}
    for key, text in values.items():
        if not key.startswith(prefix):
            continue
        name = key[len(prefix):]
        if name not in names:
            if strict:
                raise ConfigError(f"unknown config key {key!r}")
            continue
        kwargs[name] = _convert(text, hints[name], key)
    return cls(**kwargs)


def to_mapping(obj, prefix: str = "") -> dict[str, str]:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, tuple):
            text = ",".join(str(v) for v in value)
        elif isinstance(value, dict):
            text = ",".join(f"{k}:{v}" for k, v in value.items())
        elif value is None:
            text = "none"
        else:
            text = repr(value) if isinstance(value, float) else str(value)
        out[prefix + f.name] = text
    return out
