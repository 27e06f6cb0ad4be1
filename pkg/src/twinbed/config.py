"""key=value config files, one setting per line, ``#`` comments."""
from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, TypeVar

T = TypeVar("T")


class ConfigError(ValueError):
    pass


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def load_kv(path: str | Path) -> dict[str, str]:
    p = Path(path)
    return parse_kv(p.read_text(), str(p))


def _coerce(raw: str, kind: Any, key: str) -> Any:
    kind = kind if isinstance(kind, type) else {"float": float, "int": int, "bool": bool,
                                                "str": str}.get(str(kind), str)
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("1", "true", "yes", "on")
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind.__name__}") from None


def apply_kv(obj: T, settings: dict[str, str], strict: bool = True) -> T:
    """Return a copy of dataclass ``obj`` with matching fields replaced."""
    fields = {f.name: f for f in dataclasses.fields(obj)}
    changes = {}
    for key, raw in settings.items():
        if key not in fields:
            if strict:
                raise ConfigError(f"unknown setting {key!r}")
            continue
        changes[key] = _coerce(raw, fields[key].type, key)
    return dataclasses.replace(obj, **changes)
