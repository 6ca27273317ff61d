"""Run configuration: nested dataclasses loaded from a TOML file.

Unknown keys are rejected with their dotted path. Every default lives here.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class RunSection:
    seed: int = 0
    fold: int = 0
    labeled_ratio: float = 0.10
    run_id: str = "run"


@dataclass
class DataSection:
    source: str = "synthetic"  # "synthetic" or "dir"
    num_samples: int = 60
    data_dir: str = ""
    resize_to: int = 256
    size: int = 64
    gland_count: list = field(default_factory=lambda: [2, 5])
    radius: list = field(default_factory=lambda: [0.10, 0.22])
    lumen_ratio: float = 0.55
    stain_shift: float = 0.18
    noise: float = 0.04
    nuclei_density: float = 0.004
    synth_seed: int = 0


@dataclass
class ModelSection:
    num_classes: int = 2
    base_width: int = 16
    depth: int = 3


@dataclass
class UncertaintySection:
    tau_color: float = 0.5
    tau_structure: float = 0.5
    lambda_color: float = 0.5
    lambda_structure: float = 0.5
    smoothing: str = "gaussian3x3"
    eps: float = 1e-8
    weight_mode: str = "direct"


@dataclass
class AugmentSection:
    brightness: list = field(default_factory=lambda: [-0.1, 0.1])
    contrast: list = field(default_factory=lambda: [0.8, 1.2])
    saturation: list = field(default_factory=lambda: [0.8, 1.2])
    hue: list = field(default_factory=lambda: [-0.05, 0.05])
    elastic_alpha: float = 8.0
    elastic_sigma: float = 16.0
    shared_geom: bool = True


@dataclass
class OptimSection:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05


@dataclass
class EmaSection:
    alpha: float = 0.99
    strategy: str = "mean"


@dataclass
class ScheduleSection:
    epochs: int = 80
    batch_size: int = 4
    lambda_unsup: float = 1.0
    ramp_fraction: float = 0.2


@dataclass
class AblationSection:
    enable_color_student: bool = True
    enable_structure_student: bool = True
    unsup_enabled: bool = True
    pseudo_mode: str = "hard"
    teacher_init: str = "shared"


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    uncertainty: UncertaintySection = field(default_factory=UncertaintySection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    optim: OptimSection = field(default_factory=OptimSection)
    ema: EmaSection = field(default_factory=EmaSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    def validate(self) -> RunConfig:
        u, e, s, a = self.uncertainty, self.ema, self.schedule, self.ablation
        for key, v in (("uncertainty.tau_color", u.tau_color), ("uncertainty.tau_structure", u.tau_structure),
                       ("uncertainty.lambda_color", u.lambda_color),
                       ("uncertainty.lambda_structure", u.lambda_structure), ("ema.alpha", e.alpha)):
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{key} must lie in [0, 1], got {v}", key=key)
        _choice("uncertainty.weight_mode", u.weight_mode, ("direct", "inverse_exp"))
        _choice("uncertainty.smoothing", u.smoothing, ("gaussian3x3", "avgpool3x3"))
        _choice("ema.strategy", e.strategy, ("mean", "alternate", "best_student_only"))
        _choice("ablation.pseudo_mode", a.pseudo_mode, ("hard", "soft"))
        _choice("ablation.teacher_init", a.teacher_init, ("shared", "independent"))
        _choice("data.source", self.data.source, ("synthetic", "dir"))
        if s.epochs < 1:
            raise ConfigError("schedule.epochs must be >= 1", key="schedule.epochs")
        if s.batch_size < 1:
            raise ConfigError("schedule.batch_size must be >= 1", key="schedule.batch_size")
        if s.lambda_unsup < 0:
            raise ConfigError("schedule.lambda_unsup must be >= 0", key="schedule.lambda_unsup")
        if not 0.0 <= s.ramp_fraction <= 1.0:
            raise ConfigError("schedule.ramp_fraction must lie in [0, 1]", key="schedule.ramp_fraction")
        if not (a.enable_color_student or a.enable_structure_student):
            raise ConfigError("at least one student must be enabled", key="ablation")
        if not 0 < self.run.labeled_ratio <= 1:
            raise ConfigError("run.labeled_ratio must lie in (0, 1]", key="run.labeled_ratio")
        if self.optim.lr < 0 or self.optim.weight_decay < 0:
            raise ConfigError("optim.lr and optim.weight_decay must be >= 0", key="optim")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def replace(self, **overrides: Any) -> RunConfig:
        """Copy with dotted-key overrides, e.g. ``replace(**{"ema.alpha": 0.9})``."""
        d = self.to_dict()
        for dotted, value in overrides.items():
            section, _, key = dotted.partition(".")
            if section not in d or key not in d[section]:
                raise ConfigError(f"unknown config key {dotted!r}", key=dotted)
            d[section][key] = value
        return from_dict(d)


def _choice(key, value, allowed):
    if value not in allowed:
        raise ConfigError(f"{key} must be one of {allowed}, got {value!r}", key=key)


def _build(cls, raw: dict, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'} must be a table", key=path)
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        dotted = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(f"unknown config key {dotted!r}", key=dotted)
        ftype = known[key].type
        sub = _SECTIONS.get(key) if cls is RunConfig else None
        if sub is not None:
            kwargs[key] = _build(sub, value, dotted)
        else:
            kwargs[key] = _coerce(value, ftype, dotted)
    return cls(**kwargs)


def _coerce(value, ftype, dotted):
    expected = {"int": int, "float": float, "str": str, "bool": bool, "list": list}.get(str(ftype))
    if expected is None:
        return value
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected is int and isinstance(value, bool) or not isinstance(value, expected):
        raise ConfigError(f"{dotted} must be {expected.__name__}, got {type(value).__name__}", key=dotted)
    return list(value) if expected is list else value


_SECTIONS = {f.name: f.default_factory for f in dataclasses.fields(RunConfig)}


def from_dict(raw: dict) -> RunConfig:
    return _build(RunConfig, raw, "").validate()


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(raw)


def dump_toml(cfg: RunConfig) -> str:
    """Serialize to TOML (flat sections of scalars and lists only)."""
    lines = []
    for section, values in cfg.to_dict().items():
        lines.append(f"[{section}]")
        for key, v in values.items():
            lines.append(f"{key} = {_toml_value(v)}")
        lines.append("")
    return "\n".join(lines)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {v!r}")


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dump_toml(cfg))
