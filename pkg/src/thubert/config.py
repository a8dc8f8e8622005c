"""Flat ``key=value`` configuration for nested dataclasses."""
from __future__ import annotations

import dataclasses
from pathlib import Path


class ConfigError(ValueError):
    pass


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw, default, key):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            proto = default[0] if default else ""
            return tuple(_parse(s, proto, key) for s in items)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def flatten(obj, prefix=""):
    """Dataclass -> ordered ``{dotted.key: str}``."""
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            out.update(flatten(value, key + "."))
        else:
            out[key] = _fmt(value)
    return out


def apply_flat(obj, flat, prefix="", strict=True):
    """Return a copy of dataclass ``obj`` with values from ``flat`` applied.

    Unknown keys under ``prefix`` raise :class:`ConfigError` when ``strict``.
    """
    known = set()
    changes = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            sub = {k: v for k, v in flat.items() if k.startswith(key + ".")}
            changes[f.name] = apply_flat(value, sub, key + ".", strict)
            known.update(sub)
        elif key in flat:
            changes[f.name] = _parse(flat[key], value, key)
            known.add(key)
    if strict:
        unknown = [k for k in flat if k.startswith(prefix) and k not in known]
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    try:
        return dataclasses.replace(obj, **changes)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid config under {prefix or 'root'}: {err}") from None


def parse_text(text, source="<config>"):
    flat = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        key = key.strip()
        if key in flat:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key}")
        flat[key] = value.strip()
    return flat


def dump_text(flat):
    return "".join(f"{k}={v}\n" for k, v in flat.items())


def load(cls_or_obj, path):
    obj = cls_or_obj() if isinstance(cls_or_obj, type) else cls_or_obj
    return apply_flat(obj, parse_text(Path(path).read_text(), str(path)))
