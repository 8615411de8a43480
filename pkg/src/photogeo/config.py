"""Key=value config files for the training pipeline.

One ``key=value`` pair per line; blank lines and ``#`` comments are
ignored. Values are coerced by the TrainConfig field types; tuples are
comma-separated. CLI ``--set key=value`` overrides apply on top.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

__all__ = ["parse_config_text", "config_to_text", "load_config_file",
           "apply_overrides"]


def _coerce(value: str, target):
    if isinstance(target, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {value!r}")
    if isinstance(target, int):
        return int(value)
    if isinstance(target, float):
        return float(value)
    if isinstance(target, tuple):
        parts = [p for p in value.split(",") if p.strip() != ""]
        kinds = [type(t) for t in target] or [float] * len(parts)
        if len(kinds) != len(parts):
            kinds = [kinds[0]] * len(parts)
        return tuple(k(p) for k, p in zip(kinds, parts))
    return value


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {ln}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def apply_config(cfg, raw: dict[str, str]):
    """Return a copy of dataclass ``cfg`` with raw string values coerced in."""
    fields = {f.name: f for f in dataclasses.fields(cfg)}
    updates = {}
    for key, value in raw.items():
        if key not in fields:
            raise ValueError(f"unknown config key {key!r}")
        updates[key] = _coerce(value, getattr(cfg, key))
    return dataclasses.replace(cfg, **updates)


def apply_overrides(cfg, pairs: list[str]):
    raw = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"override must look like key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        raw[key.strip()] = value.strip()
    return apply_config(cfg, raw)


def load_config_file(cfg, path):
    return apply_config(cfg, parse_config_text(Path(path).read_text()))


def config_to_text(cfg) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"
