"""
Deterministic closed-loop simulation.

Per step: query the environment at the ego state, build the spline
reference, solve the OCP from the shifted previous solution, apply the first
control and advance the world by one sample. Surrounding vehicles are
scripted kinematically along polylines, so (scenario, seed) fully determines
a trial.
"""

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dynamics import (
    Bounds, ControlInput, DegenerateDynamicsError, DynamicsDomainError, VehicleParams,
    VehicleState, rollout, step,
)
from .geometry import MarkingKind, circle_centers, wrap_angle
from .nmpc import (
    InfeasibleStartError, MpcWeights, OcpProblem, SolverOptions, shift_warm_start, solve,
)
from .potentials import CLASSES, PotentialConfig, SurroundingVehicle, field_terms
from .road import (
    Polyline, ReferencePath, RoadModel, build_reference, horizon_snapshots, query_environment,
)

log = logging.getLogger(__name__)

LOG_COLUMNS = ("t", "p_x", "p_y", "phi", "v_x", "v_y", "omega", "a", "delta",
               "ref_px", "ref_py", "ref_phi", "ref_vx", "dp", "dv", "dphi",
               "F_V", "F_NR", "F_TR", "F_TL", "solve_ms")

BEHAVIORS = ("constant_speed", "piecewise_speed", "lane_follow")


# --- surrounding vehicles ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SvScript:
    """Scripted surrounding vehicle.

    constant_speed  - straight line along the initial heading at `speed`
    piecewise_speed - `schedule` of (time, speed) knots, linearly interpolated,
                      along `path` if given else along the initial heading
    lane_follow     - along `path` at constant `speed`

    The jitter fields are half-widths of uniform perturbations drawn from the
    trial seed: arc position (m), speed (m/s) and lateral offset (m).
    """

    behavior: str
    pose: Tuple[float, float, float]
    speed: float = 0.0
    schedule: Tuple[Tuple[float, float], ...] = ()
    path: Optional[np.ndarray] = None
    closed: bool = False
    lateral_offset: float = 0.0
    jitter_position: float = 0.0
    jitter_speed: float = 0.0
    jitter_lateral: float = 0.0
    length: float = 4.8
    width: float = 1.9

    def __post_init__(self):
        if self.behavior not in BEHAVIORS:
            raise ValueError(f"unknown SV behavior {self.behavior!r}")
        if self.speed < 0:
            raise ValueError("SV speed must be >= 0")
        sched = tuple((float(t), float(v)) for t, v in self.schedule)
        if any(v < 0 for _, v in sched):
            raise ValueError("SV schedule speeds must be >= 0")
        if any(b[0] <= a[0] for a, b in zip(sched, sched[1:])):
            raise ValueError("SV schedule times must be increasing")
        if self.behavior == "piecewise_speed" and not sched:
            raise ValueError("piecewise_speed needs a schedule")
        if self.behavior == "lane_follow" and self.path is None:
            raise ValueError("lane_follow needs a path")
        object.__setattr__(self, "schedule", sched)
        if self.path is not None:
            object.__setattr__(self, "path", np.asarray(self.path, dtype=float))


class SvTrack:
    """A realized (jittered) SV script: closed-form pose as a function of time."""

    def __init__(self, script: SvScript, rng: Optional[np.random.Generator] = None):
        self.script = script
        ds = dv = dl = 0.0
        if rng is not None:
            ds = rng.uniform(-1.0, 1.0) * script.jitter_position
            dv = rng.uniform(-1.0, 1.0) * script.jitter_speed
            dl = rng.uniform(-1.0, 1.0) * script.jitter_lateral
        self.lateral = script.lateral_offset + dl
        if script.schedule:
            self.knots = np.array([[t, max(v + dv, 0.0)] for t, v in script.schedule])
        else:
            self.knots = np.array([[0.0, max(script.speed + dv, 0.0)]])
        x, y, h = script.pose
        if script.path is not None:
            self.poly = Polyline(script.path, closed=script.closed)
            self.s0 = self.poly.project((x, y)).s + ds
        else:
            self.poly = None
            self.origin = (x + ds * math.cos(h), y + ds * math.sin(h))
            self.heading = h

    def speed_at(self, t: float) -> float:
        return float(np.interp(t, self.knots[:, 0], self.knots[:, 1]))

    def distance(self, t: float) -> float:
        """Arc length travelled by time t (exact for piecewise-linear speed)."""
        tk, vk = self.knots[:, 0], self.knots[:, 1]
        if t <= 0:
            return 0.0
        pts_t = np.concatenate([[0.0], tk[(tk > 0) & (tk < t)], [t]])
        pts_v = np.interp(pts_t, tk, vk)
        return float(np.sum(0.5 * (pts_v[1:] + pts_v[:-1]) * np.diff(pts_t)))

    def state(self, t: float) -> SurroundingVehicle:
        d = self.distance(t)
        v = self.speed_at(t)
        sc = self.script
        if self.poly is None:
            c, s = math.cos(self.heading), math.sin(self.heading)
            x = self.origin[0] + d * c - self.lateral * s
            y = self.origin[1] + d * s + self.lateral * c
            return SurroundingVehicle(x, y, self.heading, v, sc.length, sc.width)
        s_arc = self.s0 + d
        if not self.poly.closed and s_arc > self.poly.length:
            (px, py), h = self.poly.point_at(self.poly.length)
            extra = s_arc - self.poly.length
            px, py = px + extra * math.cos(h), py + extra * math.sin(h)
        else:
            (px, py), h = self.poly.point_at(s_arc)
        x = px - self.lateral * math.sin(h)
        y = py + self.lateral * math.cos(h)
        return SurroundingVehicle(x, y, h, v, sc.length, sc.width)


# --- world ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class World:
    time: float
    ev: VehicleState
    control: ControlInput
    svs: Tuple[SvTrack, ...]
    road: RoadModel
    params: VehicleParams = VehicleParams()

    def vehicles(self) -> Tuple[SurroundingVehicle, ...]:
        return tuple(sv.state(self.time) for sv in self.svs)

    def light_states(self) -> Tuple[float, ...]:
        return tuple(li.c_tl(self.time) for li in self.road.lights)


def tick(world: World, T_s: float, control: Optional[ControlInput] = None) -> World:
    """Advance ego (with `control`, default the world's latest control), SVs and lights by T_s."""
    u = world.control if control is None else control
    ev = step(world.ev, u, world.params, T_s)
    return replace(world, time=world.time + T_s, ev=ev, control=u)


def detect_collision(ev_pose, svs: Sequence[SurroundingVehicle], r_V: float = 1.2):
    """Circle-overlap test with the two-circle footprint; returns (hit, index of first SV hit)."""
    x, y, h = ev_pose
    ev_c = circle_centers(x, y, h, r_V)
    lim2 = (2.0 * r_V) ** 2
    for i, sv in enumerate(svs):
        for ox, oy in circle_centers(sv.p_x, sv.p_y, sv.heading, r_V):
            for qx, qy in ev_c:
                if (qx - ox) ** 2 + (qy - oy) ** 2 < lim2:
                    return True, i
    return False, None


def min_circle_distance(ev_pose, svs: Sequence[SurroundingVehicle], r_V: float = 1.2) -> float:
    x, y, h = ev_pose
    best = math.inf
    for sv in svs:
        for ox, oy in circle_centers(sv.p_x, sv.p_y, sv.heading, r_V):
            for qx, qy in circle_centers(x, y, h, r_V):
                best = min(best, math.hypot(qx - ox, qy - oy))
    return best


@dataclass(frozen=True)
class Violations:
    non_traversable: bool = False
    red_light: bool = False
    traversable_crossings: int = 0

    def __or__(self, other: "Violations") -> "Violations":
        return Violations(self.non_traversable or other.non_traversable,
                          self.red_light or other.red_light,
                          self.traversable_crossings + other.traversable_crossings)


def nr_gaps(road: RoadModel, position) -> List[float]:
    """s_R of the vehicle center to every non-traversable marking it projects onto."""
    out = []
    for mk in road.markings:
        if mk.kind is not MarkingKind.NON_TRAVERSABLE:
            continue
        proj = mk.polyline.project(position)
        if not proj.in_span:
            continue
        nx, ny = -math.sin(proj.beta), math.cos(proj.beta)
        e = (position[0] - proj.point[0]) * nx + (position[1] - proj.point[1]) * ny
        out.append(-e if mk.side.value == "left" else e)
    return out


def detect_violations(prev: VehicleState, cur: VehicleState, road: RoadModel, t: float,
                      cfg: PotentialConfig = PotentialConfig()) -> Violations:
    """Rule checks for the transition prev -> cur, with cur observed at time t.

    * non-traversable: the center's s_R to a solid marking is negative
    * red light: the front crosses a stop line while c_TL = 1
    * traversable crossings: the center changes side of a broken marking
    """
    pos = (cur.p_x, cur.p_y)
    nr = any(s < 0.0 for s in nr_gaps(road, pos))

    red = False
    f = cfg.front_offset
    front_prev = (prev.p_x + f * math.cos(prev.phi), prev.p_y + f * math.sin(prev.phi))
    front_cur = (cur.p_x + f * math.cos(cur.phi), cur.p_y + f * math.sin(cur.phi))
    for li in road.lights:
        if li.c_tl(t) == 0:
            continue
        if li.longitudinal(front_prev) < 0.0 <= li.longitudinal(front_cur):
            nx, ny = -math.sin(li.stop.beta), math.cos(li.stop.beta)
            lat = (front_cur[0] - li.stop.x) * nx + (front_cur[1] - li.stop.y) * ny
            if abs(lat) <= li.lane_width:
                red = True

    crossings = 0
    prev_pos = (prev.p_x, prev.p_y)
    for mk in road.markings:
        if mk.kind is not MarkingKind.TRAVERSABLE:
            continue
        p0 = mk.polyline.project(prev_pos)
        p1 = mk.polyline.project(pos)
        if not (p0.in_span and p1.in_span) or p1.distance > 3.0:
            continue
        n0 = (-math.sin(p0.beta), math.cos(p0.beta))
        n1 = (-math.sin(p1.beta), math.cos(p1.beta))
        e0 = (prev_pos[0] - p0.point[0]) * n0[0] + (prev_pos[1] - p0.point[1]) * n0[1]
        e1 = (pos[0] - p1.point[0]) * n1[0] + (pos[1] - p1.point[1]) * n1[1]
        if (e0 < 0.0) != (e1 < 0.0):
            crossings += 1
            log.debug("traversable marking %s crossed at t=%.2f", mk.name, t)
    return Violations(nr, red, crossings)


# --- trial ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TrialLog:
    t: np.ndarray
    states: np.ndarray  # (K, 6)
    controls: np.ndarray  # (K, 2)
    refs: np.ndarray  # (K, 6) reference at the ego's own arc position
    dp: np.ndarray
    dv: np.ndarray
    dphi: np.ndarray
    pf: np.ndarray  # (K, 4) in CLASSES order V, NR, TR, TL
    solve_ms: np.ndarray
    collision: np.ndarray  # (K,) bool
    min_gap: np.ndarray  # (K,) nearest EV/SV circle-center distance
    nr_min: np.ndarray  # (K,) smallest s_R to any solid marking (inf if none)
    c_tl: np.ndarray  # (K, n_lights)
    seed: int
    success: bool
    collided: bool
    violations: Violations
    reason: str

    @property
    def steps(self) -> int:
        return len(self.t)

    def to_csv(self, timing: bool = True) -> str:
        """One row per step in LOG_COLUMNS order; floats are written with round-trip precision."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for k in range(self.steps):
            row = [self.t[k], *self.states[k], *self.controls[k],
                   self.refs[k, 0], self.refs[k, 1], self.refs[k, 2], self.refs[k, 3],
                   self.dp[k], self.dv[k], self.dphi[k], *self.pf[k],
                   self.solve_ms[k] if timing else 0.0]
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()


@dataclass(frozen=True)
class TrialOutcome:
    success: bool
    collided: bool
    violations: Violations
    goal_reached: bool
    reason: str
    steps: int
    mean_dp: float
    mean_dv: float
    mean_dphi: float
    solve_ms_mean: float
    solve_ms_sd: float
    solve_ms_max: float
    seed: int


def read_log_csv(text: str) -> Dict[str, np.ndarray]:
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], rows[1:]
    data = np.array([[float(v) for v in r] for r in body]) if body else np.zeros((0, len(header)))
    return {name: data[:, i] for i, name in enumerate(header)}


def log_metrics(state, ref) -> Tuple[float, float, float]:
    """(dp, dv, dphi) of one logged state against its reference."""
    dp = math.hypot(state[0] - ref[0], state[1] - ref[1])
    dv = abs(state[3] - ref[3])
    dphi = abs(wrap_angle(state[2] - ref[2]))
    return dp, dv, dphi


def run_trial(scenario, seed: int, record_timing: bool = True):
    """Closed-loop trial of a ScenarioConfig; returns (TrialLog, TrialOutcome).

    Terminates on goal reached, collision or time budget. Dynamics or solver
    failures end the trial as a failed outcome instead of raising.
    """
    road = scenario.road_model
    path_wp = scenario.route().waypoints
    ref_path = ReferencePath(path_wp)
    goal = ref_path.waypoints[-1]
    rng = np.random.default_rng(seed)
    tracks = tuple(SvTrack(s, rng) for s in scenario.svs_scripts)
    params = scenario.vehicle
    cfg = scenario.potentials
    T_s, N = scenario.T_s, scenario.N
    world = World(0.0, VehicleState(*scenario.ev_initial), ControlInput(), tracks, road, params)

    n_steps = int(round(scenario.time_budget / T_s))
    rec = {k: [] for k in ("t", "x", "u", "ref", "m", "pf", "ms", "col", "gap", "nr", "tl")}
    violations = Violations()
    warm = None
    s_hint = None
    collided = False
    goal_reached = False
    reason = "time_budget"
    prev_state = world.ev
    for k in range(n_steps):
        t = k * T_s
        world = replace(world, time=t)
        ev = world.ev
        x = ev.as_array()
        svs = world.vehicles()
        hit, _ = detect_collision((ev.p_x, ev.p_y, ev.phi), svs, cfg.r_V)
        if k > 0:
            violations = violations | detect_violations(prev_state, ev, road, t, cfg)
        if math.hypot(ev.p_x - goal[0], ev.p_y - goal[1]) < scenario.goal_radius:
            goal_reached = True
            reason = "goal"
            break

        snap = query_environment(road, ev, t, vehicles=svs, cfg=cfg)
        ref = build_reference(ref_path, x, scenario.v_ref, N, T_s, s_hint)
        s_hint = ref.anchor_arc
        U0 = np.zeros((N, 2)) if warm is None else warm
        try:
            predicted = rollout(x, U0, params, T_s)
            snaps = horizon_snapshots(road, snap, predicted, t, T_s, cfg, scenario.vehicle_prediction)
            problem = OcpProblem.build(x, ref.states, snaps, cfg, weights=scenario.weights,
                                       bounds=scenario.bounds, params=params, T_s=T_s,
                                       options=scenario.solver)
            sol = solve(problem, U0)
        except (InfeasibleStartError, DegenerateDynamicsError, DynamicsDomainError) as exc:
            log.warning("trial seed=%d aborted at t=%.2f: %s", seed, t, exc)
            reason = f"aborted: {exc.__class__.__name__}"
            break
        u = sol.controls[0]
        terms = field_terms(snap, x, cfg)
        rec["t"].append(t)
        rec["x"].append(x)
        rec["u"].append(u.copy())
        rec["ref"].append(ref.anchor)
        rec["m"].append(log_metrics(x, ref.anchor))
        rec["pf"].append([terms[c] for c in CLASSES])
        rec["ms"].append(sol.solve_time_ms if record_timing else 0.0)
        rec["col"].append(hit)
        rec["gap"].append(min_circle_distance((ev.p_x, ev.p_y, ev.phi), svs, cfg.r_V))
        gaps = nr_gaps(road, (ev.p_x, ev.p_y))
        rec["nr"].append(min(gaps) if gaps else math.inf)
        rec["tl"].append(world.light_states())
        if hit:
            collided = True
            reason = "collision"
            break
        warm = shift_warm_start(sol)
        prev_state = ev
        try:
            world = tick(world, T_s, ControlInput(float(u[0]), float(u[1])))
        except (DegenerateDynamicsError, DynamicsDomainError) as exc:
            reason = f"aborted: {exc.__class__.__name__}"
            break

    K = len(rec["t"])
    metrics = np.array(rec["m"]).reshape(K, 3)
    ms = np.array(rec["ms"], dtype=float)
    trial_log = TrialLog(
        t=np.array(rec["t"], dtype=float),
        states=np.array(rec["x"]).reshape(K, 6),
        controls=np.array(rec["u"]).reshape(K, 2),
        refs=np.array(rec["ref"]).reshape(K, 6),
        dp=metrics[:, 0], dv=metrics[:, 1], dphi=metrics[:, 2],
        pf=np.array(rec["pf"], dtype=float).reshape(K, 4),
        solve_ms=ms,
        collision=np.array(rec["col"], dtype=bool),
        min_gap=np.array(rec["gap"], dtype=float),
        nr_min=np.array(rec["nr"], dtype=float),
        c_tl=np.array(rec["tl"], dtype=float).reshape(K, len(road.lights)),
        seed=seed,
        success=not collided and not reason.startswith("aborted"),
        collided=collided,
        violations=violations,
        reason=reason,
    )
    outcome = TrialOutcome(
        success=trial_log.success,
        collided=collided,
        violations=violations,
        goal_reached=goal_reached,
        reason=reason,
        steps=K,
        mean_dp=float(metrics[:, 0].mean()) if K else math.nan,
        mean_dv=float(metrics[:, 1].mean()) if K else math.nan,
        mean_dphi=float(metrics[:, 2].mean()) if K else math.nan,
        solve_ms_mean=float(ms.mean()) if K else math.nan,
        solve_ms_sd=float(ms.std()) if K else math.nan,
        solve_ms_max=float(ms.max()) if K else math.nan,
        seed=seed,
    )
    return trial_log, outcome
