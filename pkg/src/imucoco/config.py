"""Plain-text ``key = value`` configuration files.

Blank lines and ``#`` comments are ignored.  Values are parsed as int, then
float, then ``true``/``false``, falling back to the raw string.
"""
from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any

from .errors import ConfigurationError, ParseError


def _coerce(text: str) -> Any:
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    return text


def parse_kv(text: str, path=None) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw!r}", path, lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ParseError(f"empty key or value in {raw!r}", path, lineno)
        if key in out:
            raise ParseError(f"duplicate key {key!r}", path, lineno)
        out[key] = _coerce(value)
    return out


def read_kv(path) -> dict[str, Any]:
    path = Path(path)
    return parse_kv(path.read_text(), path)


def format_kv(values: dict[str, Any]) -> str:
    lines = []
    for key, value in values.items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def dataclass_from_kv(cls, values: dict[str, Any]):
    """Build dataclass ``cls`` from ``values``; unknown keys are an error."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    kwargs = {}
    for name, value in values.items():
        default = getattr(cls, name, None) if not callable(fields[name].default_factory) else None
        if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        kwargs[name] = value
    return cls(**kwargs)
