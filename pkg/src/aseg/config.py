"""Flat ``key = value`` configuration files with ``#`` comments.

Every key is a field of :class:`aseg.train.TrainConfig`. Booleans accept
true/false/1/0/yes/no; ``loss_toggles`` is a comma-separated subset of
CE,DC,SD,MSE.
"""
from __future__ import annotations

import dataclasses
from pathlib import Path

from .train import TrainConfig


class ConfigError(ValueError):
    pass


_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _field_types() -> dict[str, type]:
    defaults = TrainConfig()
    return {f.name: type(getattr(defaults, f.name)) for f in dataclasses.fields(TrainConfig)}


def parse_value(key: str, raw: str):
    types = _field_types()
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    kind = types[key]
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if kind is tuple:
            return tuple(t.strip().upper() for t in raw.split(",") if t.strip())
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r} (expected {kind.__name__})") from None


def parse_pairs(lines, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    out: dict = {}
    for n, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{n}: expected key = value, got {text!r}")
        key, raw = (s.strip() for s in text.split("=", 1))
        if key in out:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        out[key] = parse_value(key, raw)
    return out


def load_config(path=None, overrides: dict | None = None) -> TrainConfig:
    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        values = parse_pairs(p.read_text().splitlines(), str(p))
    values.update(overrides or {})
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, list):
            v = ",".join(v)
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def parse_grid(text: str, source: str = "<grid>") -> tuple[list[str], list[dict]]:
    """One variant per line: ``label: key=value key=value``; the label is optional.

    A line consisting of just a label (or ``default``) is the base config.
    """
    labels, deltas = [], []
    for n, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        label = None
        head, sep, rest = body.partition(":")
        if sep and "=" not in head:
            label, body = head.strip(), rest.strip()
        delta = parse_pairs([tok for tok in body.split() if tok != "default"] if body else [], f"{source}:{n}")
        labels.append(label or (" ".join(body.split()) or "default"))
        deltas.append(delta)
    if not deltas:
        raise ConfigError(f"{source}: grid is empty")
    return labels, deltas
