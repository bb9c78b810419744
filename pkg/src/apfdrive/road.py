"""
Road geometry: lane graph, lane markings, traffic lights, global route search,
spline reference generation and environment queries.
"""

import enum
import heapq
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import CubicSpline

from .dynamics import VehicleState
from .geometry import CenterlinePoint, MarkingKind, Side, signed_lateral_offset, wrap_angle
from .potentials import (
    EnvironmentSnapshot,
    ObservedLight,
    ObservedMarking,
    PotentialConfig,
    SurroundingVehicle,
)

MAX_MARKING_SPACING = 10.0  # [m]
DEFAULT_LANE_WIDTH = 3.5  # [m]
JOINT_TOL = 1e-3  # [m] consecutive lanes closer than this share their joint point


class NoRouteError(LookupError):
    pass


# --- polylines -----------------------------------------------------------------------


@dataclass(frozen=True)
class Projection:
    point: Tuple[float, float]
    beta: float
    s: float  # arc length of the projected point along the polyline
    distance: float
    in_span: bool  # False when the closest point is an endpoint reached from beyond it


class Polyline:
    """Piecewise-linear curve with projection and angle-interpolated tangents."""

    def __init__(self, points, closed: bool = False):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError("polyline needs at least 2 points of shape (n, 2)")
        if not np.all(np.isfinite(pts)):
            raise ValueError("polyline points must be finite")
        if closed and np.linalg.norm(pts[0] - pts[-1]) > 1e-9:
            pts = np.vstack([pts, pts[:1]])
        self.points = pts
        self.closed = closed
        d = np.diff(pts, axis=0)
        self.seg_len = np.hypot(d[:, 0], d[:, 1])
        if np.any(self.seg_len <= 0):
            raise ValueError("polyline has repeated consecutive points")
        self.seg_dir = d / self.seg_len[:, None]
        self.seg_beta = np.arctan2(d[:, 1], d[:, 0])
        self.cum = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.length = float(self.cum[-1])
        # vertex tangents: bisector of adjacent segment directions
        vb = np.empty(len(pts))
        vb[1:-1] = self.seg_beta[:-1] + 0.5 * wrap_angle(self.seg_beta[1:] - self.seg_beta[:-1])
        if closed:
            vb[0] = vb[-1] = self.seg_beta[-1] + 0.5 * wrap_angle(self.seg_beta[0] - self.seg_beta[-1])
        else:
            vb[0], vb[-1] = self.seg_beta[0], self.seg_beta[-1]
        self.vertex_beta = vb

    def project(self, p) -> Projection:
        px, py = float(p[0]), float(p[1])
        a = self.points[:-1]
        rel = np.column_stack([px - a[:, 0], py - a[:, 1]])
        t = (rel * self.seg_dir).sum(axis=1) / self.seg_len
        tc = np.clip(t, 0.0, 1.0)
        qx = a[:, 0] + tc * self.seg_len * self.seg_dir[:, 0]
        qy = a[:, 1] + tc * self.seg_len * self.seg_dir[:, 1]
        d2 = (qx - px) ** 2 + (qy - py) ** 2
        i = int(np.argmin(d2))
        ti = float(tc[i])
        in_span = True
        if not self.closed:
            if i == 0 and t[0] < 0.0:
                in_span = False
            if i == len(t) - 1 and t[-1] > 1.0:
                in_span = False
        b0, b1 = self.vertex_beta[i], self.vertex_beta[i + 1]
        beta = wrap_angle(b0 + ti * wrap_angle(b1 - b0))
        return Projection((float(qx[i]), float(qy[i])), beta, float(self.cum[i] + ti * self.seg_len[i]),
                          math.sqrt(float(d2[i])), in_span)

    def point_at(self, s: float):
        """Position and tangent at arc length `s` (wraps for closed polylines, clamps otherwise)."""
        if self.closed:
            s = s % self.length
        s = min(max(s, 0.0), self.length)
        i = int(np.searchsorted(self.cum, s, side="right") - 1)
        i = min(max(i, 0), len(self.seg_len) - 1)
        t = (s - self.cum[i]) / self.seg_len[i]
        p = self.points[i] + t * self.seg_len[i] * self.seg_dir[i]
        return (float(p[0]), float(p[1])), float(self.seg_beta[i])


# --- road elements ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LaneMarking:
    """A painted line. Points are ordered along the travel direction of the lane it bounds;
    `side` is the side of that lane on which the line lies."""

    kind: MarkingKind
    points: np.ndarray
    side: Side
    name: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "kind", MarkingKind(self.kind))
        object.__setattr__(self, "side", Side(self.side))
        if len(pts) < 2:
            raise ValueError("a lane marking needs at least 2 points")
        gaps = np.hypot(*np.diff(pts, axis=0).T)
        if np.any(gaps > MAX_MARKING_SPACING + 1e-9):
            raise ValueError(f"marking {self.name!r}: consecutive points more than {MAX_MARKING_SPACING} m apart")
        object.__setattr__(self, "polyline", Polyline(pts))


class Phase(str, enum.Enum):
    GREEN = "green"
    AMBER = "amber"
    RED = "red"


@dataclass(frozen=True)
class TrafficLight:
    """Signal governing one approach lane.

    `stop` is the lane-center point on the stop line with the road tangent of the
    approach. The phase schedule repeats after its total duration; `offset`
    shifts the cycle start.
    """

    stop: CenterlinePoint
    schedule: Tuple[Tuple[Phase, float], ...]
    lane_width: float = DEFAULT_LANE_WIDTH
    offset: float = 0.0
    name: str = ""

    def __post_init__(self):
        sched = tuple((Phase(p), float(d)) for p, d in self.schedule)
        if not sched:
            raise ValueError("traffic light needs a non-empty schedule")
        if any(d <= 0 for _, d in sched):
            raise ValueError("traffic light phase durations must be > 0")
        object.__setattr__(self, "schedule", sched)

    @property
    def cycle(self) -> float:
        return sum(d for _, d in self.schedule)

    def phase_at(self, t: float) -> Phase:
        tau = (t - self.offset) % self.cycle
        acc = 0.0
        for phase, dur in self.schedule:
            acc += dur
            # small tolerance so that accumulated sampling times land on the boundary
            if tau < acc - 1e-9:
                return phase
        return self.schedule[0][0]

    def c_tl(self, t: float) -> float:
        """0 on green, 1 otherwise (amber is treated as red)."""
        return 0.0 if self.phase_at(t) is Phase.GREEN else 1.0

    def longitudinal(self, position) -> float:
        """Signed distance of `position` past the stop line (negative upstream)."""
        c, s = math.cos(self.stop.beta), math.sin(self.stop.beta)
        return (position[0] - self.stop.x) * c + (position[1] - self.stop.y) * s


@dataclass(frozen=True, eq=False)
class LaneSegment:
    id: int
    waypoints: np.ndarray
    successors: Tuple[int, ...] = ()
    left: Optional[int] = None
    right: Optional[int] = None

    def __post_init__(self):
        wp = np.asarray(self.waypoints, dtype=float)
        if wp.ndim != 2 or wp.shape[1] != 2 or len(wp) < 2:
            raise ValueError(f"lane {self.id}: waypoints must be (n>=2, 2)")
        object.__setattr__(self, "waypoints", wp)
        object.__setattr__(self, "successors", tuple(int(s) for s in self.successors))
        object.__setattr__(self, "polyline", Polyline(wp))

    @property
    def length(self) -> float:
        return self.polyline.length

    def neighbors(self):
        out = list(self.successors)
        for n in (self.left, self.right):
            if n is not None:
                out.append(n)
        return out


@dataclass(frozen=True, eq=False)
class RoadModel:
    lanes: Tuple[LaneSegment, ...] = ()
    markings: Tuple[LaneMarking, ...] = ()
    lights: Tuple[TrafficLight, ...] = ()
    lane_width: float = DEFAULT_LANE_WIDTH

    def __post_init__(self):
        object.__setattr__(self, "lanes", tuple(self.lanes))
        object.__setattr__(self, "markings", tuple(self.markings))
        object.__setattr__(self, "lights", tuple(self.lights))
        if not self.lane_width > 0:
            raise ValueError("lane width must be > 0")
        index = {}
        for lane in self.lanes:
            if lane.id in index:
                raise ValueError(f"duplicate lane id {lane.id}")
            index[lane.id] = lane
        for lane in self.lanes:
            for n in lane.neighbors():
                if n not in index:
                    raise ValueError(f"lane {lane.id} references unknown lane {n}")
        object.__setattr__(self, "_index", index)

    def lane(self, lane_id: int) -> LaneSegment:
        try:
            return self._index[lane_id]
        except KeyError:
            raise KeyError(f"unknown lane id {lane_id}") from None

    def __contains__(self, lane_id) -> bool:
        return lane_id in self._index


# --- global route --------------------------------------------------------------------


@dataclass(frozen=True)
class GlobalPath:
    nodes: Tuple[int, ...]
    waypoints: np.ndarray
    cost: float


def route_cost(road: RoadModel, nodes: Sequence[int]) -> float:
    """Entering a lane costs its arc length; the start lane is free."""
    return float(sum(road.lane(n).length for n in nodes[1:]))


def route_waypoints(road: RoadModel, nodes: Sequence[int]) -> np.ndarray:
    chunks = []
    for n in nodes:
        wp = road.lane(n).waypoints
        if chunks and np.linalg.norm(chunks[-1][-1] - wp[0]) < JOINT_TOL:
            wp = wp[1:]
        chunks.append(wp)
    return np.vstack(chunks)


def plan_global_path(road: RoadModel, start: int, goal: int) -> GlobalPath:
    """A* over the lane graph with arc-length edge costs.

    The heuristic is the straight-line distance between lane end points; ties
    on f are broken by the lowest lane id. If some edge moves the end point
    further than the length of the lane it enters (lanes that do not join up
    geometrically), the distance is scaled down by the worst such ratio so it
    stays a lower bound. On a connected road the scale is 1.
    """
    if start not in road or goal not in road:
        raise KeyError(f"start {start} or goal {goal} not in the lane graph")
    goal_end = road.lane(goal).waypoints[-1]
    scale = 1.0
    for lane in road.lanes:
        for m in lane.neighbors():
            jump = float(np.linalg.norm(road.lane(m).waypoints[-1] - lane.waypoints[-1]))
            if jump > 0:
                scale = min(scale, road.lane(m).length / jump)

    def h(n):
        return scale * float(np.linalg.norm(road.lane(n).waypoints[-1] - goal_end))

    g_best: Dict[int, float] = {start: 0.0}
    parent: Dict[int, Optional[int]] = {start: None}
    heap = [(h(start), start, 0.0)]
    closed = set()
    while heap:
        f, n, g = heapq.heappop(heap)
        if n in closed:
            continue
        if n == goal:
            nodes = [n]
            while parent[nodes[-1]] is not None:
                nodes.append(parent[nodes[-1]])
            nodes.reverse()
            return GlobalPath(tuple(nodes), route_waypoints(road, nodes), g)
        closed.add(n)
        for m in sorted(set(road.lane(n).neighbors())):
            if m in closed:
                continue
            g2 = g + road.lane(m).length
            if g2 < g_best.get(m, math.inf) - 1e-12:
                g_best[m] = g2
                parent[m] = n
                heapq.heappush(heap, (g2 + h(m), m, g2))
    raise NoRouteError(f"no route from lane {start} to lane {goal}")


# --- spline reference -----------------------------------------------------------------

_GL_X, _GL_W = np.polynomial.legendre.leggauss(10)


class ReferencePath:
    """Natural cubic spline through waypoints, parameterized by its own arc length.

    The knot parameters are iterated to a fixed point where each knot interval
    equals the spline arc length between the knots (10-point Gauss-Legendre per
    segment), so inserting on-curve points leaves the curve essentially unchanged.
    """

    def __init__(self, waypoints, max_iter: int = 30, tol: float = 1e-12):
        wp = np.asarray(waypoints, dtype=float)
        if wp.ndim != 2 or wp.shape[1] != 2 or len(wp) == 0:
            raise ValueError("path needs at least one (x, y) waypoint")
        keep = np.concatenate([[True], np.hypot(*np.diff(wp, axis=0).T) > 1e-9])
        wp = wp[keep]
        self.waypoints = wp
        if len(wp) == 1:
            self.spline = None
            self.knots = np.zeros(1)
            self.length = 0.0
            return
        u = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(wp, axis=0).T))])
        for _ in range(max_iter):
            spline = CubicSpline(u, wp, bc_type="natural")
            seg = self._segment_lengths(spline, u)
            u_new = np.concatenate([[0.0], np.cumsum(seg)])
            done = np.max(np.abs(u_new - u)) < tol * max(1.0, u_new[-1])
            u = u_new
            if done:
                break
        self.spline = CubicSpline(u, wp, bc_type="natural")
        self._d1 = self.spline.derivative(1)
        self._d2 = self.spline.derivative(2)
        self.knots = u
        self.length = float(u[-1])
        # dense samples for projection seeding
        n = max(int(math.ceil(self.length / 0.5)), 1)
        self._su = np.linspace(0.0, self.length, n + 1)
        self._sp = self.spline(self._su)

    @staticmethod
    def _segment_lengths(spline, u):
        a, b = u[:-1], u[1:]
        half = 0.5 * (b - a)
        nodes = (0.5 * (a + b))[:, None] + half[:, None] * _GL_X[None, :]
        d = spline.derivative(1)(nodes.ravel()).reshape(nodes.shape + (2,))
        speed = np.hypot(d[..., 0], d[..., 1])
        return half * (speed * _GL_W[None, :]).sum(axis=1)

    def _arc(self, u):
        """Arc length from the start to parameter(s) u."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        i = np.clip(np.searchsorted(self.knots, u, side="right") - 1, 0, len(self.knots) - 2)
        a = self.knots[i]
        half = 0.5 * (u - a)
        nodes = (0.5 * (u + a))[:, None] + half[:, None] * _GL_X[None, :]
        d = self._d1(nodes.ravel()).reshape(nodes.shape + (2,))
        speed = np.hypot(d[..., 0], d[..., 1])
        return a + half * (speed * _GL_W[None, :]).sum(axis=1)

    def param_at(self, s):
        """Spline parameter at arc length(s) s (Newton on the arc-length integral)."""
        s = np.clip(np.atleast_1d(np.asarray(s, dtype=float)), 0.0, self.length)
        u = s.copy()
        for _ in range(8):
            d = self._d1(u)
            speed = np.hypot(d[:, 0], d[:, 1])
            step = (self._arc(u) - s) / np.maximum(speed, 1e-12)
            u = np.clip(u - step, 0.0, self.length)
            if np.max(np.abs(step)) < 1e-13:
                break
        return u

    def sample(self, s):
        """Position, tangent angle and signed curvature at arc length(s) s."""
        if self.spline is None:
            s = np.atleast_1d(np.asarray(s, dtype=float))
            pos = np.repeat(self.waypoints[:1], len(s), axis=0)
            return pos, np.zeros(len(s)), np.zeros(len(s))
        u = self.param_at(s)
        pos = self.spline(u)
        d1 = self._d1(u)
        d2 = self._d2(u)
        beta = np.arctan2(d1[:, 1], d1[:, 0])
        sp = np.hypot(d1[:, 0], d1[:, 1])
        kappa = (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]) / np.maximum(sp, 1e-12) ** 3
        return pos, beta, kappa

    def project(self, p, s_hint: Optional[float] = None, window: Tuple[float, float] = (-10.0, 40.0)) -> float:
        """Arc length of the point on the path closest to `p`.

        With `s_hint` the search is restricted to [s_hint + window[0], s_hint + window[1]],
        which keeps progress monotone on paths that pass near themselves.
        """
        if self.spline is None:
            return 0.0
        p = np.asarray(p, dtype=float)[:2]
        su, sp = self._su, self._sp
        if s_hint is not None:
            mask = (su >= s_hint + window[0]) & (su <= s_hint + window[1])
            if mask.sum() >= 2:
                su, sp = su[mask], sp[mask]
        d2 = ((sp - p) ** 2).sum(axis=1)
        i = int(np.argmin(d2))
        # refine on the spline: minimize |r(u) - p|^2 by Newton
        u = float(su[i])
        lo, hi = float(su[max(i - 1, 0)]), float(su[min(i + 1, len(su) - 1)])
        for _ in range(10):
            r = self.spline(u) - p
            d1 = self._d1(u)
            d2v = self._d2(u)
            gr = float(r @ d1)
            hs = float(d1 @ d1 + r @ d2v)
            if hs <= 1e-12:
                break
            u_new = min(max(u - gr / hs, lo), hi)
            if abs(u_new - u) < 1e-12:
                u = u_new
                break
            u = u_new
        return float(self._arc(u)[0])


@dataclass(frozen=True)
class ReferenceTrajectory:
    states: np.ndarray  # (N, 6) targets x_ref,1..x_ref,N
    arc: np.ndarray  # (N,) path arc length of each target
    anchor: np.ndarray  # (6,) target at the vehicle's own projection
    anchor_arc: float
    beyond_end: bool = False

    def __len__(self):
        return len(self.states)


def build_reference(path, ev_state, v_ref: float, N: int, T_s: float,
                    s_hint: Optional[float] = None) -> ReferenceTrajectory:
    """Sample N targets at arc-length increments v_ref * T_s ahead of the vehicle.

    Targets carry the spline tangent as heading, v_x = v_ref, v_y = 0 and
    omega = v_ref * curvature. Samples past the path end collapse to the
    terminal waypoint with zero speed.
    """
    if not v_ref > 0:
        raise ValueError("v_ref must be > 0")
    if N < 1:
        raise ValueError("horizon must be >= 1")
    if not isinstance(path, ReferencePath):
        path = ReferencePath(path)
    if isinstance(ev_state, VehicleState):
        ev = ev_state.as_array()
    else:
        ev = np.asarray(ev_state, dtype=float)
    s0 = path.project(ev[:2], s_hint)
    arcs = s0 + v_ref * T_s * np.arange(0, N + 1)
    pos, beta, kappa = path.sample(arcs)
    past = arcs >= path.length - 1e-9
    beyond_end = bool(past[0])
    if path.spline is None:
        past[:] = True
        beyond_end = True

    # heading targets unwrapped around the vehicle heading
    phi0 = ev[2] + wrap_angle(beta[0] - ev[2])
    phis = phi0 + np.concatenate([[0.0], np.cumsum(wrap_angle(np.diff(beta)))])

    states = np.zeros((N + 1, 6))
    states[:, 0:2] = pos
    states[:, 2] = phis
    states[:, 3] = np.where(past, 0.0, v_ref)
    states[:, 5] = np.where(past, 0.0, v_ref * kappa)
    return ReferenceTrajectory(states[1:], arcs[1:], states[0], float(arcs[0]), beyond_end)


# --- environment queries ----------------------------------------------------------------


def _observe_marking(mk: LaneMarking, idx: int, position, lane_width: float, rng: float,
                     ev_heading: Optional[float] = None) -> Optional[ObservedMarking]:
    proj = mk.polyline.project(position)
    if not proj.in_span or proj.distance > rng:
        return None
    beta = proj.beta
    normal = (-math.sin(beta), math.cos(beta))
    e = (position[0] - proj.point[0]) * normal[0] + (position[1] - proj.point[1]) * normal[1]
    if mk.kind is MarkingKind.TRAVERSABLE:
        # a broken line bounds whichever lane the vehicle is in
        side = Side.LEFT if e < 0 else Side.RIGHT
    else:
        side = mk.side
    # centerline point of the bounded lane: half a lane away from the line, on the lane side
    off = -0.5 * lane_width if side is Side.LEFT else 0.5 * lane_width
    ref = CenterlinePoint(proj.point[0] + off * normal[0], proj.point[1] + off * normal[1], beta)
    return ObservedMarking(mk.kind, ref, side, lane_width, idx)


def _light_active(light: TrafficLight, position, heading: float, window: float) -> bool:
    lon = light.longitudinal(position)
    if lon >= 0.0 or lon < -window:
        return False
    lat = signed_lateral_offset(position, light.stop)
    if abs(lat) > 0.5 * light.lane_width:
        return False
    return math.cos(heading - light.stop.beta) > 0.0


def query_environment(road: RoadModel, ev_state, t: float = 0.0,
                      range_m: Optional[float] = None,
                      vehicles: Sequence[SurroundingVehicle] = (),
                      cfg: PotentialConfig = PotentialConfig()) -> EnvironmentSnapshot:
    """Markings, lights and vehicles relevant to the vehicle at time t.

    Markings are included when the vehicle projects inside the marking span
    within `range_m`; lights when the vehicle front is upstream of the stop
    line within the activation window and in the governed lane.
    """
    rng = cfg.query_range if range_m is None else range_m
    if not rng > 0:
        raise ValueError("query range must be > 0")
    ev = ev_state.as_array() if isinstance(ev_state, VehicleState) else np.asarray(ev_state, dtype=float)
    pos = (float(ev[0]), float(ev[1]))
    heading = float(ev[2])
    markings = []
    for i, mk in enumerate(road.markings):
        obs = _observe_marking(mk, i, pos, road.lane_width, rng)
        if obs is not None:
            markings.append(obs)
    front = (pos[0] + cfg.front_offset * math.cos(heading), pos[1] + cfg.front_offset * math.sin(heading))
    lights = []
    for i, li in enumerate(road.lights):
        if _light_active(li, front, heading, min(cfg.tl_window, rng)):
            lights.append(ObservedLight(li.stop, li.lane_width, li.c_tl(t), i))
    near = tuple(sv for sv in vehicles if math.hypot(sv.p_x - pos[0], sv.p_y - pos[1]) <= rng)
    lane_ref = None
    best = math.inf
    for lane in road.lanes:
        proj = lane.polyline.project(pos)
        if proj.distance < best:
            best = proj.distance
            lane_ref = CenterlinePoint(proj.point[0], proj.point[1], proj.beta)
    return EnvironmentSnapshot(tuple(markings), near, tuple(lights), lane_ref, t)


def horizon_snapshots(road: RoadModel, current: EnvironmentSnapshot, predicted,
                      t0: float, T_s: float, cfg: PotentialConfig = PotentialConfig(),
                      vehicle_prediction: str = "frozen") -> List[EnvironmentSnapshot]:
    """Per-step snapshots for a horizon of predicted states.

    Marking reference points are re-projected at each predicted position so the
    local tangent follows curved roads. Lights keep the phase observed now for
    the whole horizon (the controller does not know the schedule); vehicles
    are frozen or extrapolated at constant velocity.
    """
    predicted = np.asarray(predicted, dtype=float)
    out = []
    rng = cfg.query_range
    for k, x in enumerate(predicted, start=1):
        pos = (float(x[0]), float(x[1]))
        markings = []
        for i, mk in enumerate(road.markings):
            obs = _observe_marking(mk, i, pos, road.lane_width, rng)
            if obs is not None:
                markings.append(obs)
        t = t0 + k * T_s
        if vehicle_prediction == "constant_velocity":
            vehicles = tuple(sv.advanced(k * T_s) for sv in current.vehicles)
        elif vehicle_prediction == "frozen":
            vehicles = current.vehicles
        else:
            raise ValueError(f"unknown vehicle prediction {vehicle_prediction!r}")
        out.append(EnvironmentSnapshot(tuple(markings), vehicles, current.lights, None, t))
    return out
