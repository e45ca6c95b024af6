"""Pipeline configuration: nested dataclasses parsed strictly from JSON."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .learn import MeanShiftConfig
from .synth import MaskConfig, RectSpec, SynthConfig


class ConfigError(ValueError):
    pass


@dataclass
class RenderSection:
    tau_alpha: float = 0.5


@dataclass
class SegfusionSection:
    theta_n_deg: float = 20.0
    theta_d: float = 0.10
    v_max_deg: float = 25.0


@dataclass
class LearnSection:
    lr: float = 0.5
    normal_lr: float = 0.05
    ridge: float = 1e-4
    mean_shift: MeanShiftConfig = field(default_factory=MeanShiftConfig)


@dataclass
class GeometrySection:
    k: int = 30
    align_period: int = 500
    smooth_period: int = 500


@dataclass
class GmtSection:
    eps_b: float = 1.0
    eps_z: float = 0.05
    p_min: int = 50
    theta_assign: float = 0.7
    r_min: float = 1e-9
    leaf_order: str = "extent"
    min_views: int = 8


@dataclass
class AblationSection:
    masks: bool = True
    mean_shift: bool = True
    align: bool = True
    smooth: bool = True


@dataclass
class EvalSection:
    unassigned: str = "cluster"
    gt_spacing: float = 0.03


@dataclass
class PipelineConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    render: RenderSection = field(default_factory=RenderSection)
    segfusion: SegfusionSection = field(default_factory=SegfusionSection)
    learn: LearnSection = field(default_factory=LearnSection)
    geometry: GeometrySection = field(default_factory=GeometrySection)
    gmt: GmtSection = field(default_factory=GmtSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    eval: EvalSection = field(default_factory=EvalSection)
    iterations: int = 2000
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> None:
        self.synth.validate()
        self.learn.mean_shift.validate()
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.geometry.k < 1:
            raise ConfigError("geometry.k must be >= 1")
        if self.gmt.leaf_order not in ("extent", "index", "random"):
            raise ConfigError(f"gmt.leaf_order {self.gmt.leaf_order!r} not in extent/index/random")
        if self.gmt.min_views < 0:
            raise ConfigError("gmt.min_views must be >= 0")
        if self.eval.unassigned not in ("cluster", "drop"):
            raise ConfigError("eval.unassigned must be 'cluster' or 'drop'")


def _convert(tp, value, where: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        return from_dict(tp, value, where)
    if origin is list:
        (item,) = typing.get_args(tp)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected an array")
        return [_convert(item, v, f"{where}[{i}]") for i, v in enumerate(value)]
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(f"{where}: expected an array of {len(args)} values")
        return tuple(_convert(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    raise ConfigError(f"{where}: unsupported field type {tp}")


def from_dict(cls, data: dict, where: str = "config"):
    """Build dataclass ``cls`` from ``data``, rejecting unknown keys."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {k: _convert(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    return cls(**kwargs)


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
    cfg = from_dict(PipelineConfig, data)
    for key, value in (overrides or {}).items():
        setattr(cfg, key, value)
    cfg.synth.seed = cfg.seed
    cfg.validate()
    return cfg


__all__ = ["ConfigError", "PipelineConfig", "load_config", "from_dict", "MaskConfig", "RectSpec",
           "SynthConfig", "MeanShiftConfig"]
