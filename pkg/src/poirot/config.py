"""Plain ``key = value`` configuration files mapped onto typed dataclasses."""

import dataclasses
import typing

from .errors import ConfigError, ParseError


def parse_config_text(text, path=None):
    """Ordered ``{key: raw value}``; '#' starts a comment, duplicate keys are errors."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {line!r}", lineno, path)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ParseError("empty key", lineno, path)
        if key in out:
            raise ParseError(f"duplicate key {key!r}", lineno, path)
        out[key] = value
    return out


def format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(float(v))
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    return str(v)


def _convert(raw, tp, key):
    origin = typing.get_origin(tp)
    try:
        if tp is bool:
            low = str(raw).lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return str(raw)
        if origin is tuple:
            (inner, *_) = typing.get_args(tp)
            if isinstance(raw, (tuple, list)):
                return tuple(inner(x) for x in raw)
            return tuple(inner(x.strip()) for x in str(raw).split(",") if x.strip())
        if origin is typing.Union:
            args = [a for a in typing.get_args(tp) if a is not type(None)]
            if str(raw).lower() in ("none", ""):
                return None
            return _convert(raw, args[0], key)
    except (TypeError, ValueError):
        raise ConfigError(f"invalid value {raw!r} for {key!r}") from None
    raise ConfigError(f"unsupported field type for {key!r}")


def from_mapping(cls, mapping, strict=True):
    """Build ``cls`` from string (or typed) values; unknown keys are rejected when strict."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(mapping) - names)
    if strict and unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    kwargs = {k: _convert(v, hints[k], k) for k, v in mapping.items() if k in names}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def to_text(obj):
    """Canonical key-sorted ``key = value`` block."""
    items = sorted((f.name, getattr(obj, f.name)) for f in dataclasses.fields(obj))
    return "".join(f"{k} = {format_value(v)}\n" for k, v in items)


def to_mapping(obj):
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
