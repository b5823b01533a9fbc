"""Flat ``key=value`` text files (UTF-8, ``#`` comments) used for run
configs, synthetic presets, and run manifests."""
from __future__ import annotations

from typing import Callable, Dict, Mapping

from .errors import ConfigError


def parse_kv(text: str, source: str = "<config>") -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv(path) -> Dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return parse_kv(fh.read(), str(path))


def format_kv(values: Mapping[str, object]) -> str:
    return "".join(f"{k}={v}\n" for k, v in values.items())


def coerce(values: Mapping[str, str], schema: Mapping[str, Callable[[str], object]],
           source: str = "<config>") -> Dict[str, object]:
    """Convert raw strings with ``schema``; unknown keys are errors."""
    unknown = sorted(set(values) - set(schema))
    if unknown:
        raise ConfigError(f"{source}: unknown key {unknown[0]!r}")
    out = {}
    for key, raw in values.items():
        try:
            out[key] = schema[key](raw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: bad value for {key!r}: {raw!r} ({exc})") from exc
    return out


def parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def parse_optional_float(raw: str):
    low = raw.strip().lower()
    if low in ("", "none", "off"):
        return None
    return float(raw)
