"""Flat ``key = value`` config files mapped onto dataclasses."""

import dataclasses
import typing
from pathlib import Path


def parse_pairs(text, source="config"):
    """Ordered dict of raw string values; '#' starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source} line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ValueError(f"{source} line {lineno}: duplicate key {key!r}")
        out[key] = val
    return out


def _convert(typ, raw, key):
    origin = typing.get_origin(typ)
    args = typing.get_args(typ)
    if origin is typing.Union:
        if raw.lower() in ("none", ""):
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], raw, key)
    if origin in (tuple, typing.Tuple):
        parts = [p for p in raw.replace(",", " ").split() if p]
        elem = args[0] if args else float
        return tuple(_convert(elem, p, key) for p in parts)
    if typ is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if typ in (int, float, str):
        try:
            return typ(raw)
        except ValueError:
            raise ValueError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None
    raise ValueError(f"{key}: unsupported field type {typ}")


def build(cls, values, ignore=()):
    """Instantiate dataclass ``cls`` from raw strings; unknown keys are errors."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in values.items():
        if key in ignore:
            continue
        if key not in names:
            raise ValueError(f"unknown config key {key!r} for {cls.__name__}")
        kwargs[key] = _convert(hints[key], raw, key)
    return cls(**kwargs)


def read(path):
    path = Path(path)
    return parse_pairs(path.read_text(), str(path))
