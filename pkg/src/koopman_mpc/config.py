"""Flat ``name = value`` configuration files.

Blank lines and ``#`` comments are ignored. Values are parsed as bool
(``true``/``false``), int, float, or left as strings.
"""
from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    def __init__(self, msg, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + msg)
        self.path = path
        self.line = line


def _coerce(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


def parse_config(text: str, path=None) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'name = value', got {raw.strip()!r}", path, lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"empty name or value in {raw.strip()!r}", path, lineno)
        if key in out:
            raise ConfigError(f"duplicate key {key!r}", path, lineno)
        out[key] = (_coerce(value), lineno)
    return out


def load_config(path) -> dict:
    """Read a config file; returns ``{name: (value, line_number)}``."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(str(exc), path) from exc
    return parse_config(text, path)


def format_config(values: dict) -> str:
    lines = []
    for key, value in values.items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def apply_config(defaults, entries: dict, path=None, strict=True):
    """Return a copy of dataclass ``defaults`` with matching entries applied.

    Unknown keys raise :class:`ConfigError` when ``strict``; otherwise they
    are left for another consumer.
    """
    known = set(type(defaults).keys()) if hasattr(type(defaults), "keys") else set(vars(defaults))
    changes = {}
    for key, (value, lineno) in entries.items():
        if key not in known:
            if strict:
                raise ConfigError(f"unknown key {key!r}", path, lineno)
            continue
        current = getattr(defaults, key)
        try:
            if isinstance(current, bool):
                if not isinstance(value, bool):
                    raise TypeError
            elif isinstance(current, (int, float)) and not isinstance(value, bool):
                value = type(current)(value)
            elif current is not None and not isinstance(value, type(current)):
                raise TypeError
        except (TypeError, ValueError):
            raise ConfigError(f"bad value {value!r} for {key!r}", path, lineno) from None
        changes[key] = value
    try:
        return defaults.replace(**changes)
    except ValueError as exc:
        raise ConfigError(str(exc), path) from exc
