"""Run configuration: one JSON document per command.

Every section maps onto a library dataclass. Unknown keys and wrong types
are rejected with the dotted path of the offending field, and JSON syntax
errors report the line and column.
"""

from __future__ import annotations

import dataclasses
import json
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .placerec import PlaceRecConfig
from .simworld import (
    MultiSessionParams,
    OdometryNoise,
    SensorParams,
    WorldParams,
    default_lidar,
    default_radar,
)
from .tracking import TrackConfig

# Sensor and world settings used by the bundled experiments. The radar gets
# near-range clutter and the world is dense enough for places to be told apart.
EXPERIMENT_RADAR = {"clutter_gain": 1.0, "clutter_range": 8.0, "speckle_sigma": 0.05,
                    "multipath_prob": 0.15, "dropout_prob": 0.02}
EXPERIMENT_WORLD = {"min_obstacles": 80, "max_obstacles": 80}


def _type_ok(value, hint) -> bool:
    origin = typing.get_origin(hint)
    if hint is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if hint is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if hint is bool:
        return isinstance(value, bool)
    if hint is str:
        return isinstance(value, str)
    if origin is tuple:
        return isinstance(value, (list, tuple))
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        return any(_type_ok(value, h) for h in typing.get_args(hint) if h is not type(None)) \
            or value is None
    return True


def from_mapping(cls, data, where: str, base=None):
    """Build dataclass ``cls`` from ``data`` (overriding ``base`` when given)."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(unknown)}")
    kwargs = {}
    for k, v in data.items():
        if not _type_ok(v, hints[k]):
            raise ConfigError(f"{where}.{k}: expected {hints[k]}, got {v!r}")
        if typing.get_origin(hints[k]) is tuple:
            v = tuple(v)
        kwargs[k] = v
    try:
        return dataclasses.replace(base, **kwargs) if base is not None else cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class SimulationConfig:
    world_seed: int = 1
    trajectory_seed: int = 1
    length: int = 300
    step: float = 4.0
    lidar_sessions: int = 2
    radar_sessions: int = 2
    max_lateral: float = 1.5
    odom_sigma_xy: float = 0.1
    odom_sigma_theta_deg: float = 0.5
    world: dict = field(default_factory=dict)
    lidar: dict = field(default_factory=dict)
    radar: dict = field(default_factory=dict)

    def params(self, seed: int) -> MultiSessionParams:
        world = from_mapping(WorldParams, {**EXPERIMENT_WORLD, **self.world}, "simulation.world")
        try:
            world.validate()
        except ConfigError as exc:
            raise ConfigError(f"simulation.world: {exc}") from exc
        lidar = _sensor(default_lidar(), self.lidar, "simulation.lidar")
        radar = _sensor(default_radar(), {**EXPERIMENT_RADAR, **self.radar}, "simulation.radar")
        if self.lidar_sessions < 1 or self.radar_sessions < 0 or self.length < 2:
            raise ConfigError("simulation: need length >= 2 and at least one lidar session")
        return MultiSessionParams(
            world_seed=self.world_seed, world=world, trajectory_seed=self.trajectory_seed,
            length=self.length, step=self.step, lidar_sessions=self.lidar_sessions,
            radar_sessions=self.radar_sessions, max_lateral=self.max_lateral, lidar=lidar,
            radar=radar,
            odom_noise=OdometryNoise(self.odom_sigma_xy, math.radians(self.odom_sigma_theta_deg)),
            seed=seed,
        )


def _sensor(base: SensorParams, overrides: dict, where: str) -> SensorParams:
    d = base.to_dict()
    unknown = sorted(set(overrides) - set(d))
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(unknown)}")
    if "modality" in overrides and overrides["modality"] != base.modality:
        raise ConfigError(f"{where}.modality: must stay {base.modality!r}")
    d.update(overrides)
    try:
        return SensorParams.from_dict(d)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class RunConfig:
    """Top-level document. Paths are resolved against the working directory."""

    seed: int = 0
    dataset: str = ""
    checkpoint: str = ""
    threshold: float = 3.0
    map_session: str = ""
    sessions: tuple[str, ...] = ()
    inputs: tuple[str, ...] = ()
    simulation: dict = field(default_factory=dict)
    placerec: dict = field(default_factory=dict)
    tracking: dict = field(default_factory=dict)

    def simulation_config(self) -> SimulationConfig:
        return from_mapping(SimulationConfig, self.simulation, "simulation")

    def placerec_config(self) -> PlaceRecConfig:
        return from_mapping(PlaceRecConfig, {"seed": self.seed, **self.placerec}, "placerec")

    def tracking_config(self) -> TrackConfig:
        cfg = from_mapping(TrackConfig, {"seed": self.seed, **self.tracking}, "tracking")
        try:
            cfg.offset_grid().shift_cells(cfg.resolution)
        except ValueError as exc:
            raise ConfigError(f"tracking: {exc}") from exc
        if cfg.bev_size % 8 or cfg.train_window % 8:
            raise ConfigError("tracking: bev_size and train_window must be multiples of 8")
        return cfg

    def resolved(self) -> "RunConfig":
        def fix(p):
            return str(Path(p).resolve()) if p else p
        return dataclasses.replace(self, dataset=fix(self.dataset), checkpoint=fix(self.checkpoint),
                                   inputs=tuple(fix(p) for p in self.inputs))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sessions"] = list(self.sessions)
        d["inputs"] = list(self.inputs)
        return d

    def require(self, *names: str):
        for n in names:
            if not getattr(self, n):
                raise ConfigError(f"{n}: required for this command")


def parse_config(text: str, source: str = "<config>", seed: int | None = None) -> RunConfig:
    try:
        raw = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source} line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    cfg = from_mapping(RunConfig, raw, "config")
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    # Validate the sections eagerly so errors surface before any work starts.
    cfg.simulation_config()
    cfg.placerec_config()
    cfg.tracking_config()
    if not (cfg.threshold > 0):
        raise ConfigError(f"threshold: must be > 0, got {cfg.threshold}")
    return cfg


def load_config(path, seed: int | None = None) -> RunConfig:
    if path is None:
        return parse_config("", seed=seed)
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return parse_config(text, str(p), seed)


def to_json(obj) -> str:
    """Canonical JSON: sorted keys, two-space indent, trailing newline, inf as a string."""
    return json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n"


def _plain(o):
    if isinstance(o, dict):
        return {str(k): _plain(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_plain(v) for v in o]
    if isinstance(o, np.generic):
        o = o.item()
    if isinstance(o, float) and not math.isfinite(o):
        return "inf" if o > 0 else ("-inf" if o < 0 else "nan")
    return o
