"""Flat ``section.key = value`` configuration text.

The format is the dotted-key subset of TOML, so files are parsed with
``tomli`` and flattened.  :func:`dump_flat` writes the canonical, key-sorted
form used in checkpoints and ``config.resolved``.
"""

from __future__ import annotations

import math
from pathlib import Path

try:
    import tomllib as tomli
except ModuleNotFoundError:  # Python < 3.11
    import tomli

from .exceptions import ConfigurationError

__all__ = ["parse_flat", "load_flat", "dump_flat", "format_value", "parse_value"]


def _flatten(tree: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, name + "."))
        else:
            out[name] = value
    return out


def parse_flat(text: str) -> dict:
    try:
        return _flatten(tomli.loads(text))
    except tomli.TOMLDecodeError as exc:
        raise ConfigurationError(f"malformed config: {exc}") from exc


def load_flat(path) -> dict:
    return parse_flat(Path(path).read_text())


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(format_value(v) for v in value) + "]"
    raise ConfigurationError(f"unsupported config value {value!r}")


def parse_value(text: str):
    """Parse a single value written in config syntax (used for CLI overrides)."""
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def dump_flat(values: dict) -> str:
    return "".join(f"{k} = {format_value(values[k])}\n" for k in sorted(values))
