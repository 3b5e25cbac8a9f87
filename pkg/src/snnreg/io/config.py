"""Sectioned ``key = value`` run configuration with typed parsing and unknown-key rejection.

Example::

    [data]
    shape = 32
    pairs = 32

    [network]
    encoder_channels = 8, 16, 32, 64
    decoder_channels = 32, 16, 8, 8

    [snn]
    lr = 1e-3
    epochs = 15
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from ..losses import LossWeights
from ..trainer import OptimConfig
from ..unet import NetworkSpec


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    shape: int = 32
    pairs: int = 32
    test_pairs: int = 12
    calib_pairs: int = 4
    classes: int = 4
    # peak velocity of 4 voxels leaves an initial Dice near 0.5, so trained
    # models have room to separate; amplitude <= smoothness / 2 stays fold-free
    amplitude: float = 4.0
    smoothness: float = 8.0
    seed: int = 42

    def split(self) -> tuple[int, int, int]:
        """``(train, calib, test)`` counts; small totals shrink the held-out splits."""
        test, calib = self.test_pairs, self.calib_pairs
        if self.pairs <= test + calib:
            test, calib = max(1, self.pairs // 4), max(1, self.pairs // 8)
        train = self.pairs - test - calib
        if train < 1:
            raise ConfigError(f"data.pairs={self.pairs} leaves no training pairs")
        return train, calib, test


@dataclass
class ConversionConfig:
    percentile: float = 50.0
    reservoir_cap: int = 1_000_000
    seed: int = 0


@dataclass
class SweepConfig:
    timesteps: list[int] = field(default_factory=lambda: [2, 4, 6])
    percentiles: list[float] = field(default_factory=lambda: [50.0, 75.0, 90.0])


def _desk_ann() -> OptimConfig:
    return OptimConfig(lr=1e-3, eta_min=1e-5, epochs=20)


def _desk_snn() -> OptimConfig:
    return OptimConfig(lr=1e-3, eta_min=1e-5, epochs=15)


def _desk_network() -> NetworkSpec:
    return NetworkSpec(encoder_channels=[8, 16, 32, 64], decoder_channels=[32, 16, 8, 8])


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkSpec = field(default_factory=_desk_network)
    loss: LossWeights = field(default_factory=LossWeights)
    ann: OptimConfig = field(default_factory=_desk_ann)
    snn: OptimConfig = field(default_factory=_desk_snn)
    conversion: ConversionConfig = field(default_factory=ConversionConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def to_dict(self) -> dict:
        return {f.name: dataclasses.asdict(getattr(self, f.name)) for f in dataclasses.fields(self)}

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _parse_value(text: str, typ, where: str):
    origin = typing.get_origin(typ)
    try:
        if origin in (list, tuple):
            (inner, *_) = typing.get_args(typ) or (str,)
            items = [s.strip() for s in text.replace(",", " ").split()]
            vals = [_parse_value(s, inner, where) for s in items]
            return tuple(vals) if origin is tuple else vals
        if typ is bool:
            low = text.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is str:
            return text.strip()
        if typing.get_origin(typ) is typing.Union or "|" in str(typ):
            args = [a for a in typing.get_args(typ) if a is not type(None)]
            if text.strip().lower() in ("", "none"):
                return None
            return _parse_value(text, args[0], where)
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {text!r} as {typ}") from exc
    raise ConfigError(f"{where}: unsupported field type {typ}")


def _build(cls, values: dict[str, str], section: str, base=None):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(sorted(unknown))}")
    kwargs = dataclasses.asdict(base) if base is not None else {}
    for key, text in values.items():
        kwargs[key] = _parse_value(text, hints[key], f"[{section}] {key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


SECTIONS = {f.name for f in dataclasses.fields(RunConfig)}


def parse_config(text: str = "", overrides: list[str] | None = None) -> RunConfig:
    """Parse config text and ``section.key=value`` overrides on top of the defaults."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from exc
    raw: dict[str, dict[str, str]] = {s: dict(cp[s]) for s in cp.sections()}
    for item in overrides or []:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        raw.setdefault(section, {})[name] = value
    unknown = set(raw) - SECTIONS
    if unknown:
        raise ConfigError(f"unknown sections: {', '.join(sorted(unknown))}")
    defaults = RunConfig()
    parts = {}
    for f in dataclasses.fields(RunConfig):
        base = getattr(defaults, f.name)
        parts[f.name] = _build(type(base), raw.get(f.name, {}), f.name, base)
    return RunConfig(**parts)


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    text = Path(path).read_text() if path else ""
    return parse_config(text, overrides)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section, values in cfg.to_dict().items():
        lines.append(f"[{section}]")
        for k, v in values.items():
            if isinstance(v, (list, tuple)):
                v = ", ".join(str(x) for x in v)
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)
