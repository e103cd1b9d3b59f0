"""Flat key-value config files mapped onto dataclass configs.

Format: one `key = value` per line, `#` comments, blank lines ignored.
Tuples are comma-separated; booleans are "true"/"false". Unknown keys and
duplicate keys are rejected so a stale config fails loudly.
"""

from __future__ import annotations

import dataclasses
import typing

from .corpus import DataFormatError


def read_kv_file(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataFormatError(f"{path} line {lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key = key.strip()
            if not key:
                raise DataFormatError(f"{path} line {lineno}: empty key")
            if key in out:
                raise DataFormatError(f"{path} line {lineno}: duplicate key {key!r}")
            out[key] = value.strip()
    return out


def write_kv_file(path: str, kv: dict[str, str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in kv.items():
            fh.write(f"{key} = {value}\n")


def _parse_value(text: str, ftype, key: str):
    origin = typing.get_origin(ftype)
    if origin is tuple:
        args = typing.get_args(ftype)
        elem = args[0]
        items = [t.strip() for t in text.split(",")] if text else []
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_parse_scalar(t, elem, key) for t in items)
        if len(items) != len(args):
            raise DataFormatError(f"key {key!r}: expected {len(args)} values, got {len(items)}")
        return tuple(_parse_scalar(t, a, key) for t, a in zip(items, args))
    return _parse_scalar(text, ftype, key)


def _parse_scalar(text: str, ftype, key: str):
    if ftype is bool:
        if text == "true":
            return True
        if text == "false":
            return False
        raise DataFormatError(f"key {key!r}: expected true/false, got {text!r}")
    if ftype is int:
        try:
            return int(text)
        except ValueError:
            raise DataFormatError(f"key {key!r}: not an integer: {text!r}") from None
    if ftype is float:
        try:
            return float(text)
        except ValueError:
            raise DataFormatError(f"key {key!r}: not a number: {text!r}") from None
    if ftype is str:
        return text
    raise DataFormatError(f"key {key!r}: unsupported field type {ftype!r}")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_from_kv(cls, kv: dict[str, str], base=None):
    """Build dataclass `cls` from string key-values, starting from `base` or defaults."""
    field_types = {f.name: f.type for f in dataclasses.fields(cls)}
    hints = typing.get_type_hints(cls)
    unknown = sorted(set(kv) - set(field_types))
    if unknown:
        raise DataFormatError(
            f"unknown config keys {unknown}; valid keys: {sorted(field_types)}")
    parsed = {key: _parse_value(text, hints[key], key) for key, text in kv.items()}
    if base is None:
        return cls(**parsed)
    return dataclasses.replace(base, **parsed)


def config_to_kv(config) -> dict[str, str]:
    """Dataclass back to writable key-values, in field declaration order."""
    out = {}
    for f in dataclasses.fields(config):
        out[f.name] = _format_value(getattr(config, f.name))
    return out
