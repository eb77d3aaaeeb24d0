"""Experiment configuration: flat ``key = value`` sections, unknown keys rejected.

Example::

    [experiment]
    architecture = convap
    seed = 0
    output_dir = runs/convap

    [schedule]
    rounds = 25
    backbone_sparsity = 0.9
    gammas = 0.0, 0.45, 0.9
"""
from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .layers import ARCHITECTURES, BackboneSpec, ConvBlock


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentSection:
    architecture: str = "convap"
    seed: int = 0
    output_dir: str = "runs/default"


@dataclass
class BackboneSection:
    widths: tuple[int, ...] = (16, 32, 32, 64)
    kernels: tuple[int, ...] = (3, 3, 3, 3)
    strides: tuple[int, ...] = (2, 2, 1, 1)
    residual_groups: tuple[str, ...] = ("-", "res", "res", "-")
    image_size: int = 32


@dataclass
class HeadSection:
    gem_p: float = 3.0
    ap_block: int = 2
    mixer_blocks: int = 1
    mix_depth: int = 0
    clusters: int = 8
    vlad_alpha: float = 100.0


@dataclass
class ScheduleSection:
    rounds: int = 25
    backbone_sparsity: float = 0.9
    gammas: tuple[float, ...] = (0.0,)
    stop_sparsity: float = 0.0


@dataclass
class TrainSection:
    epochs: int = 30
    lr: float = 1e-3
    decay: float = 0.3
    decay_period: int = 5
    places_per_batch: int = 8
    views_per_place: int = 4


@dataclass
class ImpSection:
    epochs_per_round: int = 2
    lr: float = 1e-4
    decay: float = 0.3
    decay_period: int = 5
    finetune: bool = True


@dataclass
class LossSection:
    alpha: float = 2.0
    beta: float = 50.0
    base: float = 0.5
    margin: float = 0.1


@dataclass
class DatasetSection:
    places: int = 32
    views: int = 16
    db_views: int = 12
    query_views: int = 4
    image_size: int = 32
    aliasing: float = 0.3
    map_size: int = 0


@dataclass
class EvalSection:
    warmup: int = 10
    trials: int = 50


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    head: HeadSection = field(default_factory=HeadSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    train: TrainSection = field(default_factory=TrainSection)
    imp: ImpSection = field(default_factory=ImpSection)
    loss: LossSection = field(default_factory=LossSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> "ExperimentConfig":
        if self.experiment.architecture not in ARCHITECTURES:
            raise ConfigError(f"architecture must be one of {ARCHITECTURES}, got {self.experiment.architecture!r}")
        b = self.backbone
        n = len(b.widths)
        if not n or any(len(x) != n for x in (b.kernels, b.strides, b.residual_groups)):
            raise ConfigError("backbone widths/kernels/strides/residual_groups must have equal length")
        if any(w < 1 for w in b.widths) or any(k < 1 for k in b.kernels) or any(s < 1 for s in b.strides):
            raise ConfigError("backbone widths, kernels and strides must be positive")
        if b.image_size != self.dataset.image_size:
            raise ConfigError("backbone.image_size must equal dataset.image_size")
        try:
            self.backbone_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        s = self.schedule
        if s.rounds < 1 or not 0 <= s.backbone_sparsity < 1:
            raise ConfigError("schedule needs rounds >= 1 and backbone_sparsity in [0, 1)")
        if not s.gammas or any(not 0 <= g < 1 for g in s.gammas):
            raise ConfigError("every gamma must lie in [0, 1)")
        if s.stop_sparsity and not 0 < s.stop_sparsity <= s.backbone_sparsity:
            raise ConfigError("stop_sparsity must lie in (0, backbone_sparsity]")
        d = self.dataset
        if d.views < 2 or d.places < 2:
            raise ConfigError("dataset needs >= 2 places and >= 2 views")
        if d.db_views < 1 or d.query_views < 1 or d.db_views + d.query_views > d.views:
            raise ConfigError("db_views + query_views must fit in views (both >= 1)")
        if d.db_views < self.train.views_per_place:
            raise ConfigError("train.views_per_place exceeds the database views per place")
        if not 0 <= d.aliasing < 1:
            raise ConfigError("dataset.aliasing must lie in [0, 1)")
        if self.eval.trials < 1:
            raise ConfigError("eval.trials must be >= 1")
        if self.loss.alpha <= 0 or self.loss.beta <= 0 or not 0 < self.loss.base < 1 or self.loss.margin < 0:
            raise ConfigError("loss needs alpha, beta > 0, base in (0, 1), margin >= 0")
        return self

    def backbone_spec(self) -> BackboneSpec:
        b = self.backbone
        blocks = [
            ConvBlock(w, k, s, None if g in ("-", "", "none") else g)
            for w, k, s, g in zip(b.widths, b.kernels, b.strides, b.residual_groups)
        ]
        return BackboneSpec(blocks, 3, (b.image_size, b.image_size))

    @property
    def output_dir(self) -> Path:
        return Path(self.experiment.output_dir)


def _convert(raw: str, typ, where: str):
    origin = typing.get_origin(typ)
    try:
        if origin is tuple:
            inner = typing.get_args(typ)[0]
            return tuple(_convert(x.strip(), inner, where) for x in raw.split(",") if x.strip())
        if typ is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from exc


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    cfg = ExperimentConfig()
    sections = {f.name: f for f in dataclasses.fields(cfg)}
    hints_cache = {}
    for name in cp.sections():
        if name not in sections:
            raise ConfigError(f"unknown section [{name}]")
        section = getattr(cfg, name)
        hints = hints_cache.setdefault(name, typing.get_type_hints(type(section)))
        for key, raw in cp.items(name):
            if key not in hints:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            setattr(section, key, _convert(raw, hints[key], f"[{name}] {key}"))
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} not found")
    return parse_config(p.read_text(encoding="utf-8"))


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        lines.append(f"[{f.name}]")
        for key, val in dataclasses.asdict(getattr(cfg, f.name)).items():
            if isinstance(val, (tuple, list)):
                val = ", ".join(str(v) for v in val)
            lines.append(f"{key} = {val}")
        lines.append("")
    return "\n".join(lines)
