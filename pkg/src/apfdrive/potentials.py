"""
Potential functions for surrounding vehicles and traffic rules.

Four classes are summed into the field F that enters the MPC cost:

* NR - non-traversable (solid) lane markings, a saturated inverse-power barrier
* TR - traversable (broken) lane markings, a one-sided quadratic that keeps the
  vehicle near the center of whichever lane it currently occupies
* V  - surrounding vehicles, inverse power of squared circle-center distances
  over the 2x2 covering-circle pairs
* TL - traffic lights, c_TL * (a_TL1 / d_x + a_TL2 / d_yl + a_TL2 / d_yr)

Scalar helpers evaluate one object; `HorizonField` packs a list of per-step
snapshots into flat arrays so the solver can get the field value and its
state gradient for a whole horizon in one vectorized pass.
"""

import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .geometry import CenterlinePoint, MarkingKind, Side, circle_centers

CLASSES = ("V", "NR", "TR", "TL")


@dataclass(frozen=True)
class PotentialConfig:
    a_NR: float = 100.0
    b_NR: float = 2.0
    nr_inner: float = 0.1  # [m] saturation distance
    nr_outer: float = 1.5  # [m] effective range
    a_TR: float = 20.0
    b_TR: float = 1.0  # [m] effective range
    a_V: float = 5.0
    b_V: float = 1.0
    r_V: float = 1.2  # [m] covering-circle offset and radius
    vehicle_d2_floor: float = 0.01  # [m^2] squared distance clamp
    a_TL1: float = 20.0
    a_TL2: float = 40.0
    tl_dx_min: float = 0.5  # [m]
    tl_dy_min: float = 0.1  # [m]
    tl_window: float = 40.0  # [m] upstream activation distance
    front_offset: float = 2.4  # [m] center to front bumper, used for d_x
    query_range: float = 50.0  # [m]

    def __post_init__(self):
        for name in ("a_NR", "a_TR", "a_V", "a_TL1", "a_TL2"):
            if getattr(self, name) < 0:
                raise ValueError(f"PotentialConfig.{name} must be >= 0")
        for name in ("b_NR", "b_TR", "r_V", "vehicle_d2_floor", "tl_dx_min", "tl_dy_min",
                     "tl_window", "query_range"):
            if not getattr(self, name) > 0:
                raise ValueError(f"PotentialConfig.{name} must be > 0")
        if self.b_V < 0:
            raise ValueError("PotentialConfig.b_V must be >= 0")
        if not self.nr_outer > self.nr_inner > 0:
            raise ValueError("PotentialConfig requires nr_outer > nr_inner > 0")

    @property
    def e_s(self) -> float:
        return self.a_NR / self.nr_outer ** self.b_NR

    @property
    def m_s(self) -> float:
        return self.a_NR / self.nr_inner ** self.b_NR - self.e_s


@dataclass(frozen=True)
class SurroundingVehicle:
    p_x: float
    p_y: float
    heading: float
    speed: float = 0.0
    length: float = 4.8
    width: float = 1.9

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.p_x, self.p_y, self.heading, self.speed)):
            raise ValueError("SurroundingVehicle must be finite")
        if self.speed < 0:
            raise ValueError("SurroundingVehicle speed must be >= 0")

    def advanced(self, dt: float) -> "SurroundingVehicle":
        """Constant-velocity extrapolation along the current heading."""
        return SurroundingVehicle(
            self.p_x + dt * self.speed * math.cos(self.heading),
            self.p_y + dt * self.speed * math.sin(self.heading),
            self.heading, self.speed, self.length, self.width,
        )


@dataclass(frozen=True)
class ObservedMarking:
    """A lane marking paired with the centerline point of the lane it bounds."""

    kind: MarkingKind
    ref: CenterlinePoint
    side: Side
    lane_width: float
    marking_id: int = -1


@dataclass(frozen=True)
class ObservedLight:
    """An active traffic light: stop-line center + road tangent, lane width and c_TL."""

    stop: CenterlinePoint
    lane_width: float
    c_tl: float
    light_id: int = -1


@dataclass(frozen=True)
class EnvironmentSnapshot:
    markings: Tuple[ObservedMarking, ...] = ()
    vehicles: Tuple[SurroundingVehicle, ...] = ()
    lights: Tuple[ObservedLight, ...] = ()
    lane_ref: Optional[CenterlinePoint] = None
    time: float = 0.0

    @property
    def is_empty(self) -> bool:
        return not (self.markings or self.vehicles or self.lights)


# --- scalar potential functions -------------------------------------------------

def _nr_arrays(s, cfg: PotentialConfig):
    s = np.asarray(s, dtype=float)
    inner = s <= cfg.nr_inner
    middle = (s > cfg.nr_inner) & (s < cfg.nr_outer)
    safe = np.where(middle, s, 1.0)
    val = np.where(inner, cfg.m_s, np.where(middle, cfg.a_NR / safe ** cfg.b_NR - cfg.e_s, 0.0))
    grad = np.where(middle, -cfg.b_NR * cfg.a_NR / safe ** (cfg.b_NR + 1.0), 0.0)
    return val, grad


def _tr_arrays(s, cfg: PotentialConfig):
    s = np.asarray(s, dtype=float)
    active = s < cfg.b_TR
    diff = s - cfg.b_TR
    val = np.where(active, cfg.a_TR * diff * diff, 0.0)
    grad = np.where(active, 2.0 * cfg.a_TR * diff, 0.0)
    return val, grad


def pf_non_traversable(s_R: float, cfg: PotentialConfig = PotentialConfig()) -> float:
    """Barrier of a solid marking as a function of the lateral gap s_R."""
    if s_R <= cfg.nr_inner:
        return cfg.m_s
    if s_R < cfg.nr_outer:
        return cfg.a_NR / s_R ** cfg.b_NR - cfg.e_s
    return 0.0


def pf_traversable(s_R: float, cfg: PotentialConfig = PotentialConfig()) -> float:
    if s_R < cfg.b_TR:
        return cfg.a_TR * (s_R - cfg.b_TR) ** 2
    return 0.0


def pf_vehicle(ev_circles, sv: SurroundingVehicle, cfg: PotentialConfig = PotentialConfig()) -> float:
    """Sum of a_V / (d^2)^b_V over the four EV/SV circle pairs.

    Squared distances below `vehicle_d2_floor` are clamped so the value stays finite.
    """
    sv_circles = circle_centers(sv.p_x, sv.p_y, sv.heading, cfg.r_V)
    total = 0.0
    for qx, qy in ev_circles:
        for ox, oy in sv_circles:
            d2 = max((qx - ox) ** 2 + (qy - oy) ** 2, cfg.vehicle_d2_floor)
            total += cfg.a_V / d2 ** cfg.b_V
    return total


def pf_traffic_light(d_x: float, d_yl: float, d_yr: float, c_TL: float,
                     cfg: PotentialConfig = PotentialConfig()) -> float:
    if c_TL == 0:
        return 0.0
    d_x = max(d_x, cfg.tl_dx_min)
    d_yl = max(d_yl, cfg.tl_dy_min)
    d_yr = max(d_yr, cfg.tl_dy_min)
    return c_TL * (cfg.a_TL1 / d_x + cfg.a_TL2 / d_yl + cfg.a_TL2 / d_yr)


# --- horizon evaluator -----------------------------------------------------------

class HorizonField:
    """Vectorized field over N states, one environment snapshot per state."""

    def __init__(self, snapshots: Sequence[EnvironmentSnapshot], cfg: PotentialConfig):
        self.cfg = cfg
        self.n = len(snapshots)
        self._pack_markings(snapshots)
        self._pack_vehicles(snapshots)
        self._pack_lights(snapshots)

    def _pack_markings(self, snapshots):
        rows = [(k, m.ref.x, m.ref.y, m.ref.beta, m.side.sign, 0.5 * m.lane_width,
                 m.kind is MarkingKind.NON_TRAVERSABLE)
                for k, snap in enumerate(snapshots) for m in snap.markings]
        if not rows:
            self.mk = None
            return
        arr = np.array(rows, dtype=float)
        beta = arr[:, 3]
        self.mk = dict(
            step=arr[:, 0].astype(int), cx=arr[:, 1], cy=arr[:, 2],
            nx=-np.sin(beta), ny=np.cos(beta), sign=arr[:, 4], halfw=arr[:, 5],
            nr=arr[:, 6] > 0.5,
        )

    def _pack_vehicles(self, snapshots):
        r = self.cfg.r_V
        rows = []
        for k, snap in enumerate(snapshots):
            for sv in snap.vehicles:
                c, s = math.cos(sv.heading), math.sin(sv.heading)
                rows.append((k, sv.p_x + r * c, sv.p_y + r * s))
                rows.append((k, sv.p_x - r * c, sv.p_y - r * s))
        if not rows:
            self.sv = None
            return
        arr = np.array(rows, dtype=float)
        self.sv = dict(step=arr[:, 0].astype(int), ox=arr[:, 1], oy=arr[:, 2])

    def _pack_lights(self, snapshots):
        rows = [(k, li.stop.x, li.stop.y, li.stop.beta, 0.5 * li.lane_width, li.c_tl)
                for k, snap in enumerate(snapshots) for li in snap.lights if li.c_tl != 0]
        if not rows:
            self.tl = None
            return
        arr = np.array(rows, dtype=float)
        beta = arr[:, 3]
        self.tl = dict(
            step=arr[:, 0].astype(int), sx=arr[:, 1], sy=arr[:, 2],
            tx=np.cos(beta), ty=np.sin(beta), nx=-np.sin(beta), ny=np.cos(beta),
            halfw=arr[:, 4], c=arr[:, 5],
        )

    def evaluate(self, X, with_grad: bool = True, by_class: bool = False):
        """Field value summed over the horizon and its gradient w.r.t. X.

        Parameters
        ----------
        X : (N, >=3) array of states; only p_x, p_y, phi enter the field.
        by_class : also return per-step, per-class values as a dict of (N,) arrays.

        Returns
        -------
        total, grad (N, 6) or None, [per-class dict]
        """
        X = np.asarray(X, dtype=float)
        n = self.n
        cfg = self.cfg
        px, py, phi = X[:, 0], X[:, 1], X[:, 2]
        g = np.zeros((n, 6)) if with_grad else None
        per_class = {}
        total = 0.0

        if self.mk is not None:
            mk = self.mk
            st = mk["step"]
            e = (px[st] - mk["cx"]) * mk["nx"] + (py[st] - mk["cy"]) * mk["ny"]
            s = mk["halfw"] - mk["sign"] * e
            nr_val, nr_grad = _nr_arrays(s, cfg)
            tr_val, tr_grad = _tr_arrays(s, cfg)
            val = np.where(mk["nr"], nr_val, tr_val)
            dval = np.where(mk["nr"], nr_grad, tr_grad)
            total += float(val.sum())
            if with_grad:
                ds_dx = -mk["sign"] * mk["nx"]
                ds_dy = -mk["sign"] * mk["ny"]
                g[:, 0] += np.bincount(st, weights=dval * ds_dx, minlength=n)
                g[:, 1] += np.bincount(st, weights=dval * ds_dy, minlength=n)
            if by_class:
                per_class["NR"] = np.bincount(st, weights=np.where(mk["nr"], val, 0.0), minlength=n)
                per_class["TR"] = np.bincount(st, weights=np.where(mk["nr"], 0.0, val), minlength=n)

        if self.sv is not None:
            sv = self.sv
            st = sv["step"]
            r = cfg.r_V
            c, s_ = np.cos(phi[st]), np.sin(phi[st])
            vals = np.zeros(len(st))
            for sgn in (1.0, -1.0):
                dx = px[st] + sgn * r * c - sv["ox"]
                dy = py[st] + sgn * r * s_ - sv["oy"]
                d2 = dx * dx + dy * dy
                clamped = d2 < cfg.vehicle_d2_floor
                d2c = np.where(clamped, cfg.vehicle_d2_floor, d2)
                v = cfg.a_V * d2c ** (-cfg.b_V)
                vals += v
                if with_grad:
                    dv_dd2 = np.where(clamped, 0.0, -cfg.b_V * v / d2c)
                    gx = dv_dd2 * 2.0 * dx
                    gy = dv_dd2 * 2.0 * dy
                    gphi = gx * (-sgn * r * s_) + gy * (sgn * r * c)
                    g[:, 0] += np.bincount(st, weights=gx, minlength=n)
                    g[:, 1] += np.bincount(st, weights=gy, minlength=n)
                    g[:, 2] += np.bincount(st, weights=gphi, minlength=n)
            total += float(vals.sum())
            if by_class:
                per_class["V"] = np.bincount(st, weights=vals, minlength=n)

        if self.tl is not None:
            tl = self.tl
            st = tl["step"]
            f = cfg.front_offset
            c, s_ = np.cos(phi[st]), np.sin(phi[st])
            fx = px[st] + f * c
            fy = py[st] + f * s_
            d_x = (tl["sx"] - fx) * tl["tx"] + (tl["sy"] - fy) * tl["ty"]
            e = (px[st] - tl["sx"]) * tl["nx"] + (py[st] - tl["sy"]) * tl["ny"]
            d_yl = tl["halfw"] - e
            d_yr = tl["halfw"] + e
            cx_ = d_x < cfg.tl_dx_min
            cl_ = d_yl < cfg.tl_dy_min
            cr_ = d_yr < cfg.tl_dy_min
            d_x = np.where(cx_, cfg.tl_dx_min, d_x)
            d_yl = np.where(cl_, cfg.tl_dy_min, d_yl)
            d_yr = np.where(cr_, cfg.tl_dy_min, d_yr)
            cc = tl["c"]
            vals = cc * (cfg.a_TL1 / d_x + cfg.a_TL2 / d_yl + cfg.a_TL2 / d_yr)
            total += float(vals.sum())
            if with_grad:
                k_x = np.where(cx_, 0.0, -cc * cfg.a_TL1 / (d_x * d_x))
                k_l = np.where(cl_, 0.0, -cc * cfg.a_TL2 / (d_yl * d_yl))
                k_r = np.where(cr_, 0.0, -cc * cfg.a_TL2 / (d_yr * d_yr))
                # d(d_x)/dP = -t, d(d_x)/dphi = -f (-sin phi, cos phi) . t
                ddx_dphi = -f * (-s_ * tl["tx"] + c * tl["ty"])
                gx = k_x * (-tl["tx"]) + (k_r - k_l) * tl["nx"]
                gy = k_x * (-tl["ty"]) + (k_r - k_l) * tl["ny"]
                g[:, 0] += np.bincount(st, weights=gx, minlength=n)
                g[:, 1] += np.bincount(st, weights=gy, minlength=n)
                g[:, 2] += np.bincount(st, weights=k_x * ddx_dphi, minlength=n)
            if by_class:
                per_class["TL"] = np.bincount(st, weights=vals, minlength=n)

        if by_class:
            for name in CLASSES:
                per_class.setdefault(name, np.zeros(n))
            return total, g, per_class
        return total, g


def _state_xyphi(ev_state):
    if hasattr(ev_state, "p_x"):
        return np.array([[ev_state.p_x, ev_state.p_y, ev_state.phi, 0.0, 0.0, 0.0]])
    x = np.zeros((1, 6))
    vals = np.asarray(ev_state, dtype=float).ravel()
    x[0, :len(vals)] = vals[:6]
    return x


def total_field(env: EnvironmentSnapshot, ev_state, cfg: PotentialConfig = PotentialConfig()) -> float:
    """F(p_env, x): all class-wise potentials summed over every observed object."""
    if env.is_empty:
        return 0.0
    total, _ = HorizonField([env], cfg).evaluate(_state_xyphi(ev_state), with_grad=False)
    return total


def field_terms(env: EnvironmentSnapshot, ev_state, cfg: PotentialConfig = PotentialConfig()) -> Dict[str, float]:
    """Class-wise decomposition {V, NR, TR, TL} of `total_field`."""
    if env.is_empty:
        return {name: 0.0 for name in CLASSES}
    _, _, per = HorizonField([env], cfg).evaluate(_state_xyphi(ev_state), with_grad=False, by_class=True)
    return {name: float(per[name][0]) for name in CLASSES}


def field_gradient(env: EnvironmentSnapshot, ev_state, cfg: PotentialConfig = PotentialConfig()) -> np.ndarray:
    """dF/dx as a 6-vector (only p_x, p_y, phi entries can be non-zero)."""
    if env.is_empty:
        return np.zeros(6)
    _, g = HorizonField([env], cfg).evaluate(_state_xyphi(ev_state))
    return g[0]
