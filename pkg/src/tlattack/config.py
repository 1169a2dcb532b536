"""Run configuration: dataclass sections read from ``section.key = value`` text."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .attack import AttackConfig
from .errors import ConfigError
from .pipeline import RetrainSpec, TrainConfig


@dataclass
class DataConfig:
    # "synth" for the procedural corpus, "idx" for an IDX image/label pair
    source: str = "synth"
    n_classes: int = 10
    per_class: int = 100
    image_side: int = 28
    noise: float = 0.05
    idx_images: str = ""
    idx_labels: str = ""
    source_classes: tuple[int, ...] = (0, 1, 2, 3, 4)
    target_classes: tuple[int, ...] = (5, 6, 7, 8, 9)
    train_per_class: int = 20
    holdout_per_class: int = 5
    # share of the non-task classes kept back as a probe pool (never trained on)
    reject_probe_fraction: float = 0.5


@dataclass
class TeacherConfig(TrainConfig):
    hidden: tuple[int, ...] = (512, 256)


@dataclass
class DefenseConfig:
    safety_factor: float = 1.0
    tail_size: int = 10
    coverage_threshold: Optional[float] = None
    delta: float = 0.5


@dataclass
class MetricsConfig:
    thresholds: tuple[float, ...] = (0.95, 0.99)
    nabac_threshold: float = 0.99
    baseline_n: int = 200


@dataclass
class PathsConfig:
    out: str = "runs/default"


SECTIONS = {
    "data": DataConfig,
    "teacher": TeacherConfig,
    "retrain": RetrainSpec,
    "attack": AttackConfig,
    "defense": DefenseConfig,
    "metrics": MetricsConfig,
    "paths": PathsConfig,
}
# sub-seeds come from the global seed, so per-section seeds are not settable
_DERIVED = {"seed"}


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    retrain: RetrainSpec = field(default_factory=RetrainSpec)
    attack: AttackConfig = field(default_factory=AttackConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)


def _convert(raw: str, hint, where: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union and type(None) in args:
        if raw.lower() in ("none", ""):
            return None
        inner = next(a for a in args if a is not type(None))
        return _convert(raw, inner, where)
    if origin is tuple:
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        return tuple(_convert(p, args[0], where) for p in parts)
    try:
        if hint is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {hint.__name__}") from None
    if hint is str:
        return raw
    raise ConfigError(f"{where}: unsupported field type {hint}")


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def parse_assignments(text: str, source: str = "<config>") -> list[tuple[str, str, int]]:
    """``(key, raw value, line number)`` for every ``key = value`` line.

    Blank lines and ``#`` comments are skipped. Duplicate keys are errors.
    """
    out, seen = [], set()
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{n}: empty key")
        if key in seen:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        seen.add(key)
        out.append((key, value, n))
    return out


def apply_overrides(config: RunConfig, assignments, source: str = "<config>") -> RunConfig:
    """New RunConfig with the dotted assignments applied."""
    updates: dict[str, dict] = {}
    top = {}
    for key, raw, n in assignments:
        where = f"{source}:{n}"
        if key == "seed":
            top["seed"] = _convert(raw, int, where)
            continue
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"{where}: unknown key {key!r}")
        hints = _hints(SECTIONS[section])
        if name not in hints or name in _DERIVED:
            raise ConfigError(f"{where}: unknown key {key!r}")
        updates.setdefault(section, {})[name] = _convert(raw, hints[name], where)
    kwargs = dict(top)
    for section, values in updates.items():
        try:
            kwargs[section] = dataclasses.replace(getattr(config, section), **values)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{source}: section {section!r}: {exc}") from exc
    return dataclasses.replace(config, **kwargs)


def loads(text: str, source: str = "<config>") -> RunConfig:
    return apply_overrides(RunConfig(), parse_assignments(text, source), source)


def load(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text, str(path))


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dumps(config: RunConfig) -> str:
    """Full config as text; ``loads(dumps(c)) == c``."""
    lines = [f"seed = {config.seed}"]
    for section in SECTIONS:
        obj = getattr(config, section)
        for f in dataclasses.fields(obj):
            if f.name in _DERIVED:
                continue
            lines.append(f"{section}.{f.name} = {_fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"
