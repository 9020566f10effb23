"""Flat ``key = value`` config files applied strictly to dataclass configs.

Lines are ``key = value``; blank lines and ``#`` comments are ignored.
Unknown keys are rejected (typos should fail loudly, not silently train a
different model). Values are parsed according to the dataclass field type.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path


class ConfigError(ValueError):
    """Bad config file: unknown key, unparsable value, or bad syntax."""


def parse_kv_file(path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', "
                              f"got {line.strip()!r}")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def _convert(raw: str, typ, key: str):
    if typ is bool:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    raise ConfigError(f"{key}: unsupported config field type {typ}")


def apply_overrides(cls, raw: dict[str, str], allow_extra: set[str] = frozenset()):
    """Build ``cls`` from defaults plus the string overrides in ``raw``.

    Keys in ``allow_extra`` are ignored (they belong to a sibling config
    read from the same file); anything else unknown is an error.
    """
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key in allow_extra:
            continue
        if key not in fields:
            valid = ", ".join(sorted(set(fields) | set(allow_extra)))
            raise ConfigError(f"unknown config key {key!r}; valid keys: {valid}")
        kwargs[key] = _convert(value, fields[key].type_resolved
                               if hasattr(fields[key], "type_resolved")
                               else _field_type(fields[key]), key)
    return cls(**kwargs)


def _field_type(f: dataclasses.Field):
    # dataclass field types may be strings under `from __future__ import
    # annotations`; resolve the few primitives we use
    t = f.type
    if isinstance(t, str):
        return {"int": int, "float": float, "bool": bool, "str": str}.get(
            t.split("|")[0].strip(), str)
    return t


def write_kv_file(path, values: dict) -> None:
    lines = [f"{k} = {_format_value(v)}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)
