"""Flat key-value experiment configs.

Grammar (one setting per line):

    # comment
    experiment = iv_study
    rng_seed = 7
    iv.T_list = 100, 200, 400

Keys are dotted lowercase identifiers; values are parsed according to the
experiment's schema (int, float, str, bool, or comma/semicolon lists).
Unknown keys are a hard error so typos cannot silently fall back to
defaults. The fully resolved config (defaults included) is echoed into the
output bundle and re-running that echo reproduces the bundle byte for
byte.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Optional

__all__ = ["ConfigError", "Key", "parse_config_text", "resolve", "format_config"]


class ConfigError(ValueError):
    """Bad config: unknown key, missing requirement, or unparsable value."""


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_list(item_parser: Callable[[str], Any], sep: str = ","):
    def parse(text: str):
        items = [tok.strip() for tok in text.split(sep) if tok.strip() != ""]
        if not items:
            raise ValueError("empty list")
        return tuple(item_parser(tok) for tok in items)

    return parse


PARSERS: dict[str, Callable[[str], Any]] = {
    "int": int,
    "float": float,
    "str": str,
    "bool": _parse_bool,
    "int_list": _parse_list(int),
    "float_list": _parse_list(float),
    # semicolon-separated because items themselves may contain commas
    # (e.g. partition labels "1,2|3")
    "str_list": _parse_list(str, sep=";"),
}


@dataclass(frozen=True)
class Key:
    """One schema entry: value type and default (None means required)."""

    type: str
    default: Any = None
    required: bool = False
    help: str = ""

    def parse(self, text: str) -> Any:
        return PARSERS[self.type](text)


def parse_config_text(text: str) -> dict[str, str]:
    """Raw key -> value-string pairs from config text.

    Raises ConfigError on malformed or duplicated lines.
    """
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def resolve(raw: dict[str, str], schema: dict[str, Key]) -> dict[str, Any]:
    """Validate raw pairs against a schema and apply defaults.

    Unknown keys and missing required keys are hard errors.
    """
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        known = ", ".join(sorted(schema))
        raise ConfigError(f"unknown config keys: {unknown}; known keys: {known}")
    resolved: dict[str, Any] = {}
    for name, key in schema.items():
        if name in raw:
            try:
                resolved[name] = key.parse(raw[name])
            except (ValueError, KeyError) as exc:
                raise ConfigError(f"key {name!r}: cannot parse {raw[name]!r} ({exc})") from exc
        elif key.required:
            raise ConfigError(f"missing required config key {name!r}")
        else:
            resolved[name] = key.default
    return resolved


def _format_value(value: Any, key: Key) -> str:
    if isinstance(value, tuple):
        sep = "; " if key.type == "str_list" else ", "
        return sep.join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def format_config(resolved: dict[str, Any], schema: dict[str, Key]) -> str:
    """Canonical echo of a resolved config (sorted keys, parse-stable)."""
    lines = [f"{k} = {_format_value(v, schema[k])}" for k, v in sorted(resolved.items())]
    return "\n".join(lines) + "\n"
