"""Flat ``key=value`` run configuration.

One pair per line, ``#`` starts a comment. Keys carry a section prefix that
names the dataclass they populate::

    train.epochs=12
    distill.beta=0.9
    synth.noise_sigma=0.1
    net.num_mid_layers=1
    data.train_fraction=0.8333333333333334

Unknown sections or fields are rejected; absent keys keep their defaults.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import SynthConfig
from .losses import DistillConfig
from .nets import NetConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    train_fraction: float = 5 / 6
    split_seed: int = 0
    # 0 keeps the whole train split; otherwise the first n training samples
    train_limit: int = 0
    teacher_epochs: int = 0  # 0 means train.epochs

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("data.train_fraction must lie in (0, 1)")
        if self.train_limit < 0 or self.teacher_epochs < 0:
            raise ValueError("data.train_limit and data.teacher_epochs must be >= 0")


@dataclass(frozen=True)
class NetSection:
    """Network shapes; empty channel lists double per block from 16 (teacher) or 8 (student)."""

    num_mid_layers: int = 2
    teacher_channels: tuple[int, ...] = ()
    student_channels: tuple[int, ...] = ()

    def __post_init__(self):
        for kind in ("teacher", "student"):
            self.build(kind, (64, 64))

    def channels(self, kind: str) -> tuple[int, ...]:
        given = self.teacher_channels if kind == "teacher" else self.student_channels
        base = 16 if kind == "teacher" else 8
        return tuple(given) or tuple(base * 2 ** i for i in range(self.num_mid_layers + 2))

    def build(self, kind: str, input_size: tuple[int, int], seed: int = 0) -> NetConfig:
        cfg = NetConfig(encoder_channels=self.channels(kind), num_mid_layers=self.num_mid_layers,
                        input_size=tuple(input_size), seed=seed)
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class CliConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    data: DataConfig = field(default_factory=DataConfig)
    net: NetSection = field(default_factory=NetSection)

    def train_config(self, **overrides) -> TrainConfig:
        return replace(self.train, distill=self.distill, **overrides)

    def teacher_config(self) -> TrainConfig:
        epochs = self.data.teacher_epochs or self.train.epochs
        return replace(self.train, mode="teacher", epochs=epochs, distill=self.distill)


SECTIONS = {"train": TrainConfig, "distill": DistillConfig, "synth": SynthConfig, "data": DataConfig,
            "net": NetSection}
# nested or derived fields that are not settable from a file
_SKIP = {("train", "distill"), ("train", "mode")}


def _field_types(cls) -> dict[str, object]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def _coerce(raw: str, typ, key: str):
    origin = typing.get_origin(typ)
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        if origin is tuple:
            args = typing.get_args(typ)
            elem = args[0]
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            return tuple(_coerce(p, elem, key) for p in parts)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None
    raise ConfigError(f"{key}: unsupported field type {typ}")


def parse_config(text: str) -> CliConfig:
    values: dict[str, dict[str, object]] = {name: {} for name in SECTIONS}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        types = _field_types(SECTIONS[section])
        if name not in types or (section, name) in _SKIP:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if name in values[section]:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[section][name] = _coerce(raw, types[name], key)
    try:
        built = {name: cls(**values[name]) for name, cls in SECTIONS.items()}
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return CliConfig(**built)


def load_config(path) -> CliConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path}: not UTF-8 ({exc})") from None
    return parse_config(text)


def dump_config(cfg: CliConfig) -> str:
    """Every settable key with its current value, in a stable order."""
    lines = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in fields(obj):
            if (section, f.name) in _SKIP:
                continue
            val = getattr(obj, f.name)
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            elif isinstance(val, float):
                val = repr(val)
            lines.append(f"{section}.{f.name}={val}")
    return "\n".join(lines) + "\n"


def with_seed(cfg: CliConfig, seed: int | None) -> CliConfig:
    """``--seed`` pins a single training seed and the synthetic generator."""
    if seed is None:
        return cfg
    return dataclasses.replace(cfg, train=replace(cfg.train, seeds=(seed,)),
                               synth=replace(cfg.synth, seed=seed))
