"""Flat ``key = value`` config files mapped onto dataclass fields."""

from __future__ import annotations

import configparser
import dataclasses
import enum
import types
import typing
from pathlib import Path

__all__ = ["ConfigError", "read_flat", "read_sections", "coerce", "from_mapping"]

_ROOT = "__root__"


class ConfigError(ValueError):
    pass


def _parser() -> configparser.ConfigParser:
    p = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    p.optionxform = str
    return p


def read_flat(path) -> dict[str, str]:
    """Read a sectionless key/value file (``key = value`` or ``key: value`` per line)."""
    text = Path(path).read_text(encoding="utf-8")
    p = _parser()
    try:
        p.read_string(f"[{_ROOT}]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    return dict(p[_ROOT])


def read_sections(path) -> dict[str, dict[str, str]]:
    """Read a file of ``[name]`` sections, each a flat key/value block."""
    p = _parser()
    try:
        p.read_string(Path(path).read_text(encoding="utf-8"))
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    return {name: dict(p[name]) for name in p.sections()}


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def coerce(text: str, tp):
    """Convert a config string to the annotated field type."""
    if not isinstance(text, str):
        return text
    s = text.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if s.lower() in {"none", "null", ""} and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return coerce(s, inner[0])
    if tp is bool:
        if s.lower() in _TRUE:
            return True
        if s.lower() in _FALSE:
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if tp is int:
        return int(s)
    if tp is float:
        return float(s)
    if tp is str:
        return s
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        return tp(s.upper())
    if origin is tuple:
        parts = [p for p in s.replace("(", "").replace(")", "").split(",") if p.strip()]
        elem = args[0] if args else str
        return tuple(coerce(p, elem) for p in parts)
    if origin is dict:
        kt, vt = args or (str, str)
        out = {}
        for item in s.replace("{", "").replace("}", "").split(","):
            if not item.strip():
                continue
            k, _, v = item.partition(":")
            out[coerce(k, kt)] = coerce(v, vt)
        return out
    return s


def from_mapping(cls, mapping: dict, base=None):
    """Build dataclass ``cls`` from string values, starting from ``base`` if given."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(mapping) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        values = {k: coerce(v, hints[k]) for k, v in mapping.items()}
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    if base is not None:
        return dataclasses.replace(base, **values)
    return cls(**values)
