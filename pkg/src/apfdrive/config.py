"""
Scenario configuration files.

A scenario is a YAML document with nested sections mirroring the runtime
types. Unknown keys are rejected. Speeds may be given with an explicit unit
suffix ("35 km/h", "9.7 m/s"); plain numbers are SI. Road geometry is written
as a list of primitives that are expanded into waypoints:

    - line: [x0, y0, x1, y1]
    - arc: [cx, cy, radius, start_deg, end_deg]   # counter-clockwise if end > start
    - points: [[x, y], ...]
"""

import math
import re
from dataclasses import asdict, dataclass, fields
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np
import yaml

from .dynamics import Bounds, VehicleParams
from .geometry import CenterlinePoint
from .nmpc import MpcWeights, SolverOptions
from .potentials import PotentialConfig
from .road import (
    JOINT_TOL, GlobalPath, LaneMarking, LaneSegment, Polyline, RoadModel, TrafficLight, plan_global_path,
)
from .simulator import SvScript

PRESETS = ("roundabout", "multilane_acc", "crossroad", "straight", "fig2_layout")


class ConfigError(ValueError):
    """Invalid or unparsable scenario configuration."""


# --- geometry primitives -------------------------------------------------------------

Primitive = Tuple[str, Tuple]


def expand_geometry(prims, spacing: float = 2.0) -> np.ndarray:
    """Concatenate primitives into a waypoint array, sampled at most `spacing` apart."""
    out = []
    for kind, args in prims:
        if kind == "line":
            x0, y0, x1, y1 = args
            n = max(1, int(math.ceil(math.hypot(x1 - x0, y1 - y0) / spacing)))
            t = np.linspace(0.0, 1.0, n + 1)
            pts = np.column_stack([x0 + t * (x1 - x0), y0 + t * (y1 - y0)])
        elif kind == "arc":
            cx, cy, r, a0, a1 = args
            sweep = math.radians(a1 - a0)
            n = max(1, int(math.ceil(abs(sweep) * r / spacing)))
            ang = math.radians(a0) + np.linspace(0.0, sweep, n + 1)
            pts = np.column_stack([cx + r * np.cos(ang), cy + r * np.sin(ang)])
        elif kind == "points":
            pts = np.asarray(args, dtype=float)
        else:
            raise ConfigError(f"unknown geometry primitive {kind!r}")
        if out and np.hypot(*(pts[0] - out[-1][-1])) < JOINT_TOL:
            pts = pts[1:]
        if len(pts):
            out.append(pts)
    if not out:
        raise ConfigError("empty geometry")
    return np.vstack(out)


# --- config types --------------------------------------------------------------------


@dataclass(frozen=True)
class LaneSpec:
    id: int
    geometry: Tuple[Primitive, ...]
    successors: Tuple[int, ...] = ()
    left: Optional[int] = None
    right: Optional[int] = None


@dataclass(frozen=True)
class MarkingSpec:
    kind: str
    side: str
    geometry: Tuple[Primitive, ...]
    name: str = ""


@dataclass(frozen=True)
class LightSpec:
    stop: Tuple[float, float, float]  # x, y, beta [rad]
    schedule: Tuple[Tuple[str, float], ...]
    lane_width: float = 3.5
    offset: float = 0.0
    name: str = ""


@dataclass(frozen=True)
class RoadSpec:
    lane_width: float = 3.5
    spacing: float = 2.0
    lanes: Tuple[LaneSpec, ...] = ()
    markings: Tuple[MarkingSpec, ...] = ()
    lights: Tuple[LightSpec, ...] = ()


@dataclass(frozen=True)
class SvSpec:
    behavior: str
    pose: Optional[Tuple[float, float, float]] = None
    path: Tuple[Primitive, ...] = ()
    closed: bool = False
    start_s: float = 0.0
    speed: float = 0.0
    schedule: Tuple[Tuple[float, float], ...] = ()
    lateral_offset: float = 0.0
    jitter_position: float = 0.0
    jitter_speed: float = 0.0
    jitter_lateral: float = 0.0

    def script(self, spacing: float = 2.0) -> SvScript:
        path = expand_geometry(self.path, spacing) if self.path else None
        pose = self.pose
        if path is not None:
            (x, y), h = Polyline(path, closed=self.closed).point_at(self.start_s)
            pose = (x, y, h)
        return SvScript(self.behavior, pose, self.speed, self.schedule, path, self.closed,
                        self.lateral_offset, self.jitter_position, self.jitter_speed,
                        self.jitter_lateral)


@dataclass(frozen=True, eq=True)
class ScenarioConfig:
    name: str
    road: RoadSpec
    ev_initial: Tuple[float, ...]
    start_lane: int
    goal_lane: int
    v_ref: float
    description: str = ""
    svs: Tuple[SvSpec, ...] = ()
    potentials: PotentialConfig = PotentialConfig()
    weights: MpcWeights = MpcWeights()
    bounds: Bounds = Bounds()
    vehicle: VehicleParams = VehicleParams()
    solver: SolverOptions = SolverOptions()
    N: int = 10
    T_s: float = 0.05
    trials: int = 30
    seed: int = 0
    time_budget: float = 60.0
    goal_radius: float = 3.0
    vehicle_prediction: str = "frozen"

    def __post_init__(self):
        if not self.v_ref > 0:
            raise ConfigError("v_ref: must be > 0")
        if self.trials < 1:
            raise ConfigError("trials: must be >= 1")
        if self.N < 1:
            raise ConfigError("N: must be >= 1")
        if not self.T_s > 0:
            raise ConfigError("T_s: must be > 0")
        if not self.time_budget > 0:
            raise ConfigError("time_budget: must be > 0")
        if not self.goal_radius > 0:
            raise ConfigError("goal_radius: must be > 0")
        if len(self.ev_initial) != 6:
            raise ConfigError("ev.initial: needs 6 state entries")
        if self.vehicle_prediction not in ("frozen", "constant_velocity"):
            raise ConfigError("vehicle_prediction: must be 'frozen' or 'constant_velocity'")
        ids = {ln.id for ln in self.road.lanes}
        for name, lane_id in (("ev.start_lane", self.start_lane), ("ev.goal_lane", self.goal_lane)):
            if lane_id not in ids:
                raise ConfigError(f"{name}: lane {lane_id} does not exist")

    @cached_property
    def road_model(self) -> RoadModel:
        return self.build_road()

    def build_road(self) -> RoadModel:
        rs = self.road
        lanes = [LaneSegment(ln.id, expand_geometry(ln.geometry, rs.spacing), ln.successors, ln.left, ln.right)
                 for ln in rs.lanes]
        marks = [LaneMarking(mk.kind, expand_geometry(mk.geometry, rs.spacing), mk.side, mk.name)
                 for mk in rs.markings]
        lights = [TrafficLight(CenterlinePoint(*li.stop), li.schedule, li.lane_width, li.offset, li.name)
                  for li in rs.lights]
        return RoadModel(lanes, marks, lights, rs.lane_width)

    def route(self) -> GlobalPath:
        return plan_global_path(self.road_model, self.start_lane, self.goal_lane)

    @property
    def svs_scripts(self) -> Tuple[SvScript, ...]:
        return tuple(s.script(self.road.spacing) for s in self.svs)


# --- parsing -------------------------------------------------------------------------

_SPEED = re.compile(r"^\s*([-+0-9.eE]+)\s*(km/h|m/s)\s*$")


def parse_speed(value, where: str) -> float:
    """Numbers are m/s; strings need an explicit 'km/h' or 'm/s' suffix."""
    if isinstance(value, bool):
        raise ConfigError(f"{where}: expected a speed, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        m = _SPEED.match(value)
        if m:
            try:
                num = float(m.group(1))
            except ValueError:
                raise ConfigError(f"{where}: bad number in {value!r}") from None
            return num * 1000.0 / 3600.0 if m.group(2) == "km/h" else num
    raise ConfigError(f"{where}: expected a speed like 35 or '35 km/h', got {value!r}")


def _section(data, where: str, allowed, required=()) -> Dict[str, Any]:
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(map(str, unknown))}")
    for key in required:
        if key not in data:
            raise ConfigError(f"{where}.{key}: missing required field" if where else f"{key}: missing required field")
    return data


def _num(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    return float(value)


def _int(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    return value


def _vec(value, where: str, n: Optional[int] = None) -> Tuple[float, ...]:
    if not isinstance(value, (list, tuple)):
        raise ConfigError(f"{where}: expected a list")
    if n is not None and len(value) != n:
        raise ConfigError(f"{where}: expected {n} entries, got {len(value)}")
    return tuple(_num(v, f"{where}[{i}]") for i, v in enumerate(value))


def _geometry(value, where: str) -> Tuple[Primitive, ...]:
    if not isinstance(value, list) or not value:
        raise ConfigError(f"{where}: expected a non-empty list of primitives")
    prims = []
    for i, item in enumerate(value):
        w = f"{where}[{i}]"
        if not isinstance(item, dict) or len(item) != 1:
            raise ConfigError(f"{w}: expected one of line/arc/points")
        (kind, args), = item.items()
        if kind == "line":
            prims.append(("line", _vec(args, f"{w}.line", 4)))
        elif kind == "arc":
            arc = _vec(args, f"{w}.arc", 5)
            if not arc[2] > 0:
                raise ConfigError(f"{w}.arc: radius must be > 0")
            prims.append(("arc", arc))
        elif kind == "points":
            if not isinstance(args, list) or not args:
                raise ConfigError(f"{w}.points: expected a list of [x, y]")
            prims.append(("points", tuple(_vec(p, f"{w}.points[{j}]", 2) for j, p in enumerate(args))))
        else:
            raise ConfigError(f"{w}: unknown primitive {kind!r}")
    return tuple(prims)


def _dataclass_section(cls, data, where: str, speeds=(), tuples=()):
    names = [f.name for f in fields(cls)]
    _section(data, where, names)
    kw = {}
    for key, value in data.items():
        w = f"{where}.{key}"
        if key in speeds:
            kw[key] = parse_speed(value, w)
        elif key in tuples:
            kw[key] = tuple(float(v) if not isinstance(v, str) else parse_speed(v, f"{w}")
                            for v in _as_list(value, w))
        elif isinstance(value, int) and not isinstance(value, bool) and cls is SolverOptions and key in (
                "max_iter", "max_line_search"):
            kw[key] = value
        else:
            kw[key] = _num(value, w)
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _as_list(value, where):
    if not isinstance(value, (list, tuple)):
        raise ConfigError(f"{where}: expected a list")
    for i, v in enumerate(value):
        if isinstance(v, bool) or not isinstance(v, (int, float, str)):
            raise ConfigError(f"{where}[{i}]: expected a number")
    return value


def _parse_road(data) -> RoadSpec:
    d = _section(data, "road", ("lane_width", "spacing", "lanes", "markings", "lights"), ("lanes",))
    lanes = []
    for i, ln in enumerate(d.get("lanes") or []):
        w = f"road.lanes[{i}]"
        ln = _section(ln, w, ("id", "geometry", "successors", "left", "right"), ("id", "geometry"))
        lanes.append(LaneSpec(
            _int(ln["id"], f"{w}.id"), _geometry(ln["geometry"], f"{w}.geometry"),
            tuple(_int(s, f"{w}.successors") for s in ln.get("successors", []) or []),
            None if ln.get("left") is None else _int(ln["left"], f"{w}.left"),
            None if ln.get("right") is None else _int(ln["right"], f"{w}.right"),
        ))
    ids = {ln.id for ln in lanes}
    if len(ids) != len(lanes):
        raise ConfigError("road.lanes: duplicate lane id")
    for ln in lanes:
        for ref in (*ln.successors, ln.left, ln.right):
            if ref is not None and ref not in ids:
                raise ConfigError(f"road.lanes: lane {ln.id} references unknown lane {ref}")
    marks = []
    for i, mk in enumerate(d.get("markings") or []):
        w = f"road.markings[{i}]"
        mk = _section(mk, w, ("kind", "side", "geometry", "name"), ("kind", "side", "geometry"))
        if mk["kind"] not in ("non_traversable", "traversable"):
            raise ConfigError(f"{w}.kind: must be non_traversable or traversable")
        if mk["side"] not in ("left", "right"):
            raise ConfigError(f"{w}.side: must be left or right")
        marks.append(MarkingSpec(mk["kind"], mk["side"], _geometry(mk["geometry"], f"{w}.geometry"),
                                 str(mk.get("name", ""))))
    lights = []
    for i, li in enumerate(d.get("lights") or []):
        w = f"road.lights[{i}]"
        li = _section(li, w, ("stop", "schedule", "lane_width", "offset", "name"), ("stop", "schedule"))
        sched = []
        if not isinstance(li["schedule"], list) or not li["schedule"]:
            raise ConfigError(f"{w}.schedule: expected a non-empty list of [phase, seconds]")
        for j, entry in enumerate(li["schedule"]):
            if not isinstance(entry, list) or len(entry) != 2 or entry[0] not in ("green", "amber", "red"):
                raise ConfigError(f"{w}.schedule[{j}]: expected [green|amber|red, seconds]")
            dur = _num(entry[1], f"{w}.schedule[{j}]")
            if not dur > 0:
                raise ConfigError(f"{w}.schedule[{j}]: duration must be > 0")
            sched.append((entry[0], dur))
        lights.append(LightSpec(_vec(li["stop"], f"{w}.stop", 3), tuple(sched),
                                _num(li.get("lane_width", 3.5), f"{w}.lane_width"),
                                _num(li.get("offset", 0.0), f"{w}.offset"), str(li.get("name", ""))))
    width = _num(d.get("lane_width", 3.5), "road.lane_width")
    spacing = _num(d.get("spacing", 2.0), "road.spacing")
    if not width > 0:
        raise ConfigError("road.lane_width: must be > 0")
    if not 0 < spacing <= 10:
        raise ConfigError("road.spacing: must be in (0, 10]")
    return RoadSpec(width, spacing, tuple(lanes), tuple(marks), tuple(lights))


def _parse_sv(data, where) -> SvSpec:
    keys = [f.name for f in fields(SvSpec)]
    d = _section(data, where, keys, ("behavior",))
    kw = {"behavior": d["behavior"]}
    if "pose" in d:
        kw["pose"] = _vec(d["pose"], f"{where}.pose", 3)
    if "path" in d:
        kw["path"] = _geometry(d["path"], f"{where}.path")
    if "closed" in d:
        if not isinstance(d["closed"], bool):
            raise ConfigError(f"{where}.closed: expected true/false")
        kw["closed"] = d["closed"]
    if "speed" in d:
        kw["speed"] = parse_speed(d["speed"], f"{where}.speed")
    if "schedule" in d:
        sched = []
        for j, e in enumerate(d["schedule"] or []):
            if not isinstance(e, list) or len(e) != 2:
                raise ConfigError(f"{where}.schedule[{j}]: expected [time, speed]")
            sched.append((_num(e[0], f"{where}.schedule[{j}]"), parse_speed(e[1], f"{where}.schedule[{j}]")))
        kw["schedule"] = tuple(sched)
    for key in ("start_s", "lateral_offset", "jitter_position", "jitter_lateral"):
        if key in d:
            kw[key] = _num(d[key], f"{where}.{key}")
    if "jitter_speed" in d:
        kw["jitter_speed"] = parse_speed(d["jitter_speed"], f"{where}.jitter_speed")
    if "pose" not in kw and "path" not in kw:
        raise ConfigError(f"{where}: needs a pose or a path")
    spec = SvSpec(**kw)
    try:
        spec.script()
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    return spec


TOP_KEYS = ("name", "description", "road", "ev", "v_ref", "svs", "potentials", "weights", "bounds",
            "vehicle", "solver", "N", "T_s", "trials", "seed", "time_budget", "goal_radius",
            "vehicle_prediction")


def config_from_dict(data) -> ScenarioConfig:
    d = _section(data, "", TOP_KEYS, ("name", "road", "ev", "v_ref"))
    road = _parse_road(d["road"])
    ev = _section(d["ev"], "ev", ("initial", "start_lane", "goal_lane"), ("initial", "start_lane", "goal_lane"))
    initial = list(ev["initial"]) if isinstance(ev["initial"], list) else ev["initial"]
    if isinstance(initial, list) and len(initial) == 6:
        initial[3] = parse_speed(initial[3], "ev.initial[3]")
    initial = _vec(initial, "ev.initial", 6)
    kw = dict(
        name=str(d["name"]),
        description=str(d.get("description", "")),
        road=road,
        ev_initial=initial,
        start_lane=_int(ev["start_lane"], "ev.start_lane"),
        goal_lane=_int(ev["goal_lane"], "ev.goal_lane"),
        v_ref=parse_speed(d["v_ref"], "v_ref"),
        svs=tuple(_parse_sv(s, f"svs[{i}]") for i, s in enumerate(d.get("svs") or [])),
    )
    if "potentials" in d:
        kw["potentials"] = _dataclass_section(PotentialConfig, d["potentials"], "potentials")
    if "weights" in d:
        kw["weights"] = _dataclass_section(MpcWeights, d["weights"], "weights", tuples=("Q", "R", "R_d"))
    if "bounds" in d:
        kw["bounds"] = _dataclass_section(Bounds, d["bounds"], "bounds",
                                          tuples=("x_min", "x_max", "u_min", "u_max"))
    if "vehicle" in d:
        kw["vehicle"] = _dataclass_section(VehicleParams, d["vehicle"], "vehicle")
    if "solver" in d:
        kw["solver"] = _dataclass_section(SolverOptions, d["solver"], "solver")
    for key in ("N", "trials", "seed"):
        if key in d:
            kw[key] = _int(d[key], key)
    for key in ("T_s", "time_budget", "goal_radius"):
        if key in d:
            kw[key] = _num(d[key], key)
    if "vehicle_prediction" in d:
        kw["vehicle_prediction"] = d["vehicle_prediction"]
    return ScenarioConfig(**kw)


def parse_config(text: str, source: str = "<string>") -> ScenarioConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}:{mark.column + 1}" if mark is not None else source
        raise ConfigError(f"{where}: parse error: {getattr(exc, 'problem', exc)}") from None
    if data is None:
        raise ConfigError(f"{source}: empty config")
    return config_from_dict(data)


def preset_path(name: str) -> Path:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r} (available: {', '.join(PRESETS)})")
    return Path(str(resources.files("apfdrive") / "presets" / f"{name}.yaml"))


def load_config(path) -> ScenarioConfig:
    """Load and validate a scenario file (or a bundled preset given by bare name)."""
    p = Path(path)
    if not p.exists() and str(path) in PRESETS:
        p = preset_path(str(path))
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from None
    return parse_config(text, str(p))


# --- echo ----------------------------------------------------------------------------


def _geometry_out(prims):
    out = []
    for kind, args in prims:
        if kind == "points":
            out.append({"points": [list(p) for p in args]})
        else:
            out.append({kind: list(args)})
    return out


def config_to_dict(cfg: ScenarioConfig) -> Dict[str, Any]:
    rs = cfg.road
    road = {
        "lane_width": rs.lane_width,
        "spacing": rs.spacing,
        "lanes": [{"id": ln.id, "geometry": _geometry_out(ln.geometry), "successors": list(ln.successors),
                   "left": ln.left, "right": ln.right} for ln in rs.lanes],
        "markings": [{"kind": mk.kind, "side": mk.side, "geometry": _geometry_out(mk.geometry), "name": mk.name}
                     for mk in rs.markings],
        "lights": [{"stop": list(li.stop), "schedule": [[p, d] for p, d in li.schedule],
                    "lane_width": li.lane_width, "offset": li.offset, "name": li.name} for li in rs.lights],
    }
    svs = []
    for sv in cfg.svs:
        item = {"behavior": sv.behavior}
        if sv.pose is not None:
            item["pose"] = list(sv.pose)
        if sv.path:
            item["path"] = _geometry_out(sv.path)
        item.update(closed=sv.closed, start_s=sv.start_s, speed=sv.speed,
                    schedule=[list(e) for e in sv.schedule], lateral_offset=sv.lateral_offset,
                    jitter_position=sv.jitter_position, jitter_speed=sv.jitter_speed,
                    jitter_lateral=sv.jitter_lateral)
        svs.append(item)

    def plain(dc):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(dc).items()}

    return {
        "name": cfg.name,
        "description": cfg.description,
        "road": road,
        "ev": {"initial": list(cfg.ev_initial), "start_lane": cfg.start_lane, "goal_lane": cfg.goal_lane},
        "v_ref": cfg.v_ref,
        "svs": svs,
        "potentials": plain(cfg.potentials),
        "weights": plain(cfg.weights),
        "bounds": plain(cfg.bounds),
        "vehicle": plain(cfg.vehicle),
        "solver": plain(cfg.solver),
        "N": cfg.N,
        "T_s": cfg.T_s,
        "trials": cfg.trials,
        "seed": cfg.seed,
        "time_budget": cfg.time_budget,
        "goal_radius": cfg.goal_radius,
        "vehicle_prediction": cfg.vehicle_prediction,
    }


class _FlowListDumper(yaml.SafeDumper):
    pass


def _represent_list(dumper, data):
    flow = all(not isinstance(v, (list, dict)) for v in data)
    return dumper.represent_sequence("tag:yaml.org,2002:seq", data, flow_style=flow)


_FlowListDumper.add_representer(list, _represent_list)


def dump_config(cfg: ScenarioConfig) -> str:
    """Fully expanded YAML (all defaults written out, SI units)."""
    return yaml.dump(config_to_dict(cfg), Dumper=_FlowListDumper, sort_keys=False, default_flow_style=False)
