"""Key-value config files (TOML syntax, flat or one level of tables)."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import tomli


class ConfigError(ValueError):
    pass


def load_kv(path: str | Path) -> dict[str, Any]:
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def parse_kv(text: str) -> dict[str, Any]:
    try:
        return tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(str(exc)) from exc


def dump_kv(values: dict[str, Any]) -> str:
    """Write a flat mapping back out; values must be str, int, float or bool."""
    lines = []
    for key, value in values.items():
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, (int, float)):
            text = repr(value)
        elif isinstance(value, str):
            text = json.dumps(value)
        else:
            raise ConfigError(f"unsupported value for {key!r}: {value!r}")
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def config_hash(values: dict[str, Any]) -> str:
    blob = json.dumps(values, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()
