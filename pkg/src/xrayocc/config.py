"""Run configuration: nested dataclasses loaded from / dumped to JSON with strict validation."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .geometry import ConeBeamGeometry, ReconSpace, divide_subspaces
from .network import Setup


class ConfigError(ValueError):
    pass


@dataclass
class GeometryConfig:
    sid: float = 1000.0
    sdd: float = 1500.0
    detector: list[int] = field(default_factory=lambda: [64, 64])
    spacing: list[float] = field(default_factory=lambda: [2.5, 2.5])
    views: list[float] = field(default_factory=lambda: [0.0, math.pi / 2])
    isocenter: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])


@dataclass
class SpaceConfig:
    lo: list[float] = field(default_factory=lambda: [-40.0, -40.0, -40.0])
    hi: list[float] = field(default_factory=lambda: [40.0, 40.0, 40.0])


@dataclass
class DataConfig:
    n_train: int = 8
    n_val: int = 2
    n_test: int = 4
    base_seed: int = 0
    n_points: int = 2048
    volume_dims: int = 64
    step: typing.Optional[float] = None


@dataclass
class ModelConfig:
    channels: int = 16
    K: int = 4
    distill_layers: list[int] = field(default_factory=lambda: [3])
    alpha: float = 0.2
    mlp_hidden: list[int] = field(default_factory=lambda: [64, 64, 32])


@dataclass
class TrainConfig:
    epochs: int = 60
    lr: float = 3e-4
    warmup_epochs: int = 0
    batch: int = 1
    seed: int = 0


@dataclass
class EvalConfig:
    resolution: int = 32
    n_points: int = 512
    runs: int = 3
    gt_resolution: int = 96
    chunk: int = 8192


@dataclass
class PathsConfig:
    data_dir: str = "data"
    runs_dir: str = "runs"


@dataclass
class RunConfig:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    space: SpaceConfig = field(default_factory=SpaceConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def validate(self) -> "RunConfig":
        checks = [
            (self.geometry.sdd > self.geometry.sid > 0, "geometry.sdd", "sdd > sid > 0"),
            (len(self.geometry.detector) == 2 and min(self.geometry.detector) >= 2, "geometry.detector", "[H, W] with H, W >= 2"),
            (all(d % 4 == 0 for d in self.geometry.detector), "geometry.detector", "sizes divisible by 4 (two stride-2 stages)"),
            (len(self.geometry.spacing) == 2 and min(self.geometry.spacing) > 0, "geometry.spacing", "two positive values"),
            (len(self.geometry.views) >= 1, "geometry.views", "at least one view angle"),
            (len(self.geometry.isocenter) == 3, "geometry.isocenter", "3 coordinates"),
            (len(self.space.lo) == 3 and len(self.space.hi) == 3, "space", "3D lo/hi corners"),
            (all(h > l for l, h in zip(self.space.lo, self.space.hi)), "space", "hi > lo on every axis"),
            (min(self.data.n_train, self.data.n_val, self.data.n_test) >= 1, "data", "at least one phantom per split"),
            (self.data.n_points > 0 and self.data.n_points % 2 == 0, "data.n_points", "a positive even count"),
            (self.data.step is None or self.data.step > 0, "data.step", "a positive step or null"),
            (self.model.K >= 1, "model.K", "an integer >= 1"),
            (self.model.alpha >= 0, "model.alpha", "a non-negative float"),
            (self.model.channels >= 1, "model.channels", "a positive integer"),
            (len(self.model.distill_layers) >= 1 and set(self.model.distill_layers) <= {1, 2, 3}, "model.distill_layers", "stages from {1, 2, 3}"),
            (self.train.batch == 1, "train.batch", "1 (one phantom per step)"),
            (self.train.epochs >= 1 and self.train.lr > 0, "train", "epochs >= 1 and lr > 0"),
            (self.train.warmup_epochs >= 0, "train.warmup_epochs", "a non-negative integer"),
            (self.eval.resolution >= 8, "eval.resolution", "an integer >= 8"),
        ]
        for ok, key, expected in checks:
            if not ok:
                raise ConfigError(f"invalid value for '{key}': expected {expected}")
        return self


def _type_name(tp) -> str:
    return getattr(tp, "__name__", None) or str(tp).replace("typing.", "")


def _check_value(key: str, value, tp):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _check_value(key, value, args[0])
    if origin is list:
        (elem,) = typing.get_args(tp)
        if not isinstance(value, list):
            raise ConfigError(f"'{key}' must be a list of {_type_name(elem)}, got {type(value).__name__}")
        return [_check_value(f"{key}[{i}]", v, elem) for i, v in enumerate(value)]
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"'{key}' must be float, got {type(value).__name__}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"'{key}' must be int, got {type(value).__name__}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"'{key}' must be str, got {type(value).__name__}")
        return value
    if dataclasses.is_dataclass(tp):
        return _from_dict(tp, value, key)
    raise ConfigError(f"'{key}': unsupported type {tp}")


def _from_dict(cls, data, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"'{prefix or 'config'}' must be an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            where = f"{prefix}.{key}" if prefix else key
            raise ConfigError(f"unknown config key '{where}'")
    kwargs = {}
    for name in names:
        if name in data:
            where = f"{prefix}.{name}" if prefix else name
            kwargs[name] = _check_value(where, data[name], hints[name])
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    return _from_dict(RunConfig, data).validate()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return config_from_dict(data)


def make_setup(cfg: RunConfig, K: int | None = None) -> Setup:
    g = cfg.geometry
    space = ReconSpace(tuple(cfg.space.lo), tuple(cfg.space.hi))
    geoms = [
        ConeBeamGeometry(g.sid, g.sdd, tuple(g.detector), tuple(g.spacing), float(a), tuple(g.isocenter))
        for a in g.views
    ]
    k = cfg.model.K if K is None else K
    return Setup(geoms, space, [divide_subspaces(space, geom, k, i) for i, geom in enumerate(geoms)])


def render_hash(cfg: RunConfig) -> str:
    """Key of everything that changes the rendered dataset."""
    d = cfg.to_dict()
    payload = {"geometry": d["geometry"], "space": d["space"], "data": {k: d["data"][k] for k in ("base_seed", "n_train", "n_val", "n_test", "volume_dims", "step")}, "K": cfg.model.K}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

