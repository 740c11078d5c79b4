"""Flat ``key = value`` run configuration with dotted section prefixes.

Three sections exist: ``model.*`` (architecture), ``train.*`` (protocol)
and ``data.*`` (paths).  Unknown keys are rejected by name, values are
converted by the declared field type, and serialisation is deterministic
so a config round-trips exactly.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field

from .blocks import ModelConfig
from .training import TrainConfig

__all__ = ["DataPaths", "RunConfig", "parse_config", "format_config", "apply_overrides"]


@dataclass
class DataPaths:
    train_manifest: str = ""
    eval_manifest: str = ""
    checkpoint_dir: str = "runs"
    report_dir: str = "reports"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataPaths = field(default_factory=DataPaths)


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataPaths}


def _field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _convert(key: str, text: str, typ):
    text = text.strip()
    if typ is bool:
        if text.lower() in ("true", "1", "yes", "on"):
            return True
        if text.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {text!r}")
    try:
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
    except ValueError:
        raise ValueError(f"{key}: expected {typ.__name__}, got {text!r}") from None
    return text


def _set_key(values: dict, key: str, raw: str) -> None:
    if "." not in key:
        raise ValueError(f"config key {key!r} lacks a section prefix (model./train./data.)")
    section, name = key.split(".", 1)
    cls = _SECTIONS.get(section)
    if cls is None:
        raise ValueError(f"unknown config section {section!r} in key {key!r}")
    types = _field_types(cls)
    if name not in types:
        raise ValueError(f"unknown config key {key!r}")
    values[section][name] = _convert(key, raw, types[name])


def _build(values: dict) -> RunConfig:
    return RunConfig(
        model=ModelConfig(**values["model"]),
        train=TrainConfig(**values["train"]),
        data=DataPaths(**values["data"]),
    )


def parse_config(text: str) -> RunConfig:
    """Parse config text; raises ValueError naming any bad key or value."""
    values: dict = {s: {} for s in _SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        try:
            _set_key(values, key, val)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return _build(values)


def format_config(rc: RunConfig) -> str:
    """Serialise every field in declaration order."""
    lines = []
    for section, cls in _SECTIONS.items():
        obj = getattr(rc, section)
        for f in dataclasses.fields(cls):
            v = getattr(obj, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{section}.{f.name} = {v}")
        lines.append("")
    return "\n".join(lines)


def apply_overrides(rc: RunConfig, overrides) -> RunConfig:
    """Return a new RunConfig with ``key=value`` strings applied on top."""
    values = {
        "model": dataclasses.asdict(rc.model),
        "train": dataclasses.asdict(rc.train),
        "data": dataclasses.asdict(rc.data),
    }
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, val = (part.strip() for part in item.split("=", 1))
        _set_key(values, key, val)
    return _build(values)
