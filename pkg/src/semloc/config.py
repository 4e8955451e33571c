"""YAML configuration for the world generator and the run pipeline.

Two file kinds exist. A world config drives `semloc gen`:

    world:
      lane_count: 2
      lane_width: 3.5
      segments: [[150.0, 0.0], [150.0, 0.006], [100.0, 0.0]]
      pole_spacing: 30.0
      signboard_arclengths: [50.0, 250.0]
      seed: 42
    noise:
      odom_trans_sigma: 0.01
      odom_yaw_sigma: 0.001
      gps_xy_sigma: 3.0
    cameras:
      front_only: false
    dt: 0.1
    thickness: 3
    seed: 7

A run config drives `semloc run` and `semloc init-rate`:

    sequence: out/seq
    output: out/run
    grid:
      lateral: {half_range: 10.0, step: 0.2}
      longitudinal: {half_range: 5.0, step: 0.5}
      yaw: {half_range_deg: 6.0, step_deg: 1.0}
    tracker: {huber_delta: 0.3}
    graph: {window_capacity: 10, odometry_weight: 1.0}
    pipeline:
      longitudinal_correction: true
      init_cost_gate: 0.5
      init_retry_budget: 150
      rpe_interval: 5
    seed: 0

Sections may be omitted or partial; unspecified fields keep their defaults.
Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import yaml

from .errors import ConfigError
from .initializer import GridAxis, GridSpec, default_grid
from .posegraph import GraphConfig
from .simworld import SensorNoiseSpec, WorldSpec
from .tracker import TrackerConfig


@dataclass(frozen=True)
class WorldGenConfig:
    world: WorldSpec
    noise: SensorNoiseSpec
    front_only: bool = False
    dt: float = 0.1
    thickness: int = 3
    seed: int = 0


@dataclass(frozen=True)
class PipelineConfig:
    sequence: str
    output: str
    grid: GridSpec
    tracker: TrackerConfig
    graph: GraphConfig
    longitudinal_correction: bool = True
    init_cost_gate: float = 0.5
    init_retry_budget: int = 150
    rpe_interval: int = 5
    seed: int = 0


def _load_yaml(path) -> dict:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def _section(data: dict, name: str) -> dict:
    section = data.get(name, {})
    if section is None:
        section = {}
    if not isinstance(section, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    return section


def _build(cls, given: dict, where: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(given) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**given)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_world_config(path) -> WorldGenConfig:
    data = _load_yaml(path)
    known = {"world", "noise", "cameras", "dt", "thickness", "seed"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")

    world_kwargs = dict(_section(data, "world"))
    for key in ("segments", "signboard_arclengths"):
        if key in world_kwargs:
            world_kwargs[key] = tuple(
                tuple(v) if isinstance(v, (list, tuple)) else v
                for v in world_kwargs[key]
            )
    world = _build(WorldSpec, world_kwargs, "world")
    noise = _build(SensorNoiseSpec, dict(_section(data, "noise")), "noise")

    cameras = _section(data, "cameras")
    unknown = set(cameras) - {"front_only"}
    if unknown:
        raise ConfigError(f"cameras: unknown keys {sorted(unknown)}")

    cfg = WorldGenConfig(
        world=world,
        noise=noise,
        front_only=bool(cameras.get("front_only", False)),
        dt=float(data.get("dt", 0.1)),
        thickness=int(data.get("thickness", 3)),
        seed=int(data.get("seed", 0)),
    )
    cfg.world.validate()
    cfg.noise.validate()
    if cfg.dt <= 0:
        raise ConfigError("dt must be positive")
    if cfg.thickness < 0:
        raise ConfigError("thickness must be >= 0")
    return cfg


def _build_grid(given: dict) -> GridSpec:
    if not given:
        return default_grid()
    axes = []
    for axis_name, params in given.items():
        if axis_name not in ("lateral", "longitudinal", "yaw"):
            raise ConfigError(f"grid: unknown axis {axis_name!r}")
        if not isinstance(params, dict):
            raise ConfigError(f"grid.{axis_name}: must be a mapping")
        if axis_name == "yaw":
            allowed = {"half_range_deg", "step_deg"}
            unknown = set(params) - allowed
            if unknown:
                raise ConfigError(f"grid.yaw: unknown keys {sorted(unknown)}")
            axes.append(
                GridAxis(
                    "yaw",
                    math.radians(float(params["half_range_deg"])),
                    math.radians(float(params["step_deg"])),
                )
            )
        else:
            allowed = {"half_range", "step"}
            unknown = set(params) - allowed
            if unknown:
                raise ConfigError(f"grid.{axis_name}: unknown keys {sorted(unknown)}")
            axes.append(
                GridAxis(axis_name, float(params["half_range"]), float(params["step"]))
            )
    return GridSpec(tuple(axes))


def load_run_config(path) -> PipelineConfig:
    data = _load_yaml(path)
    known = {"sequence", "output", "grid", "tracker", "graph", "pipeline", "seed"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    for required in ("sequence", "output"):
        if required not in data:
            raise ConfigError(f"{path}: missing required key {required!r}")

    grid = _build_grid(dict(_section(data, "grid")))
    tracker = _build(TrackerConfig, dict(_section(data, "tracker")), "tracker")
    graph = _build(GraphConfig, dict(_section(data, "graph")), "graph")

    pipe = _section(data, "pipeline")
    allowed = {
        "longitudinal_correction",
        "init_cost_gate",
        "init_retry_budget",
        "rpe_interval",
    }
    unknown = set(pipe) - allowed
    if unknown:
        raise ConfigError(f"pipeline: unknown keys {sorted(unknown)}")

    cfg = PipelineConfig(
        sequence=str(data["sequence"]),
        output=str(data["output"]),
        grid=grid,
        tracker=tracker,
        graph=graph,
        longitudinal_correction=bool(pipe.get("longitudinal_correction", True)),
        init_cost_gate=float(pipe.get("init_cost_gate", 0.5)),
        init_retry_budget=int(pipe.get("init_retry_budget", 150)),
        rpe_interval=int(pipe.get("rpe_interval", 5)),
        seed=int(data.get("seed", 0)),
    )
    try:
        cfg.grid.validate()
        cfg.tracker.validate()
        cfg.graph.validate()
    except Exception as exc:
        raise ConfigError(str(exc)) from exc
    if not 0.0 < cfg.init_cost_gate <= 1.0:
        raise ConfigError("init_cost_gate must be in (0, 1]")
    if cfg.init_retry_budget < 1:
        raise ConfigError("init_retry_budget must be >= 1")
    if cfg.rpe_interval < 1:
        raise ConfigError("rpe_interval must be >= 1")
    return cfg
