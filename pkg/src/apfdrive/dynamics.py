"""
Discrete nonlinear bicycle model (backward-Euler form) and its analytic Jacobians.

State  x = [p_x, p_y, phi, v_x, v_y, omega]
Input  u = [a, delta]

    p_x'   = p_x + T (v_x cos phi - v_y sin phi)
    p_y'   = p_y + T (v_y cos phi + v_x sin phi)
    phi'   = phi + T omega
    v_x'   = v_x + T a
    v_y'   = (m v_x v_y + T L_k omega - T k_f delta v_x - T m v_x^2 omega)
             / (m v_x - T (k_f + k_r))
    omega' = (I_z v_x omega + T L_k v_y - T l_f k_f delta v_x)
             / (I_z v_x - T (l_f^2 k_f + l_r^2 k_r))

with L_k = l_f k_f - l_r k_r. Cornering stiffnesses are negative by convention,
which keeps both denominators positive for v_x >= 0.
"""

import math
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np
import numpy.typing as npt

DoubleArray = npt.NDArray[np.float64]

NX = 6
NU = 2
DENOMINATOR_EPS = 1e-9

STATE_NAMES = ("p_x", "p_y", "phi", "v_x", "v_y", "omega")
INPUT_NAMES = ("a", "delta")


class DynamicsDomainError(ValueError):
    """Raised when a state or input is not finite."""


class DegenerateDynamicsError(ArithmeticError):
    """Raised when one of the model denominators collapses to ~0."""


@dataclass(frozen=True)
class VehicleState:
    p_x: float = 0.0
    p_y: float = 0.0
    phi: float = 0.0
    v_x: float = 0.0
    v_y: float = 0.0
    omega: float = 0.0

    def as_array(self) -> DoubleArray:
        return np.array([self.p_x, self.p_y, self.phi, self.v_x, self.v_y, self.omega], dtype=float)

    @classmethod
    def from_array(cls, x) -> "VehicleState":
        x = np.asarray(x, dtype=float)
        return cls(*(float(v) for v in x[:NX]))

    @property
    def position(self) -> DoubleArray:
        return np.array([self.p_x, self.p_y])


@dataclass(frozen=True)
class ControlInput:
    a: float = 0.0
    delta: float = 0.0

    def as_array(self) -> DoubleArray:
        return np.array([self.a, self.delta], dtype=float)

    @classmethod
    def from_array(cls, u) -> "ControlInput":
        u = np.asarray(u, dtype=float)
        return cls(float(u[0]), float(u[1]))


@dataclass(frozen=True)
class VehicleParams:
    """Vehicle model constants. Defaults are the mid-size sedan used in the urban scenarios."""

    m: float = 1412.0  # [kg]
    l_f: float = 1.06  # [m] mass center to front axle
    l_r: float = 1.85  # [m] mass center to rear axle
    k_f: float = -128916.0  # [N/rad]
    k_r: float = -85944.0  # [N/rad]
    I_z: float = 1536.7  # [kg m^2]

    def __post_init__(self):
        checks = {
            "m > 0": self.m > 0,
            "I_z > 0": self.I_z > 0,
            "l_f > 0": self.l_f > 0,
            "l_r > 0": self.l_r > 0,
            "k_f < 0": self.k_f < 0,
            "k_r < 0": self.k_r < 0,
        }
        for name, ok in checks.items():
            if not ok:
                raise ValueError(f"VehicleParams violates {name}")

    @property
    def L_k(self) -> float:
        return self.l_f * self.k_f - self.l_r * self.k_r


@dataclass(frozen=True)
class Bounds:
    """Box bounds on states and inputs.

    Position and heading are unbounded by default; the remaining defaults are
    sized for 20-40 km/h urban references.
    """

    x_min: Tuple[float, ...] = (-math.inf, -math.inf, -math.inf, 0.0, -3.0, -1.0)
    x_max: Tuple[float, ...] = (math.inf, math.inf, math.inf, 16.7, 3.0, 1.0)
    u_min: Tuple[float, ...] = (-6.0, -0.6)
    u_max: Tuple[float, ...] = (3.0, 0.6)

    def __post_init__(self):
        if len(self.x_min) != NX or len(self.x_max) != NX:
            raise ValueError("state bounds must have 6 entries")
        if len(self.u_min) != NU or len(self.u_max) != NU:
            raise ValueError("input bounds must have 2 entries")
        if any(lo > hi for lo, hi in zip(self.x_min, self.x_max)):
            raise ValueError("state bounds not ordered (min <= max)")
        if any(lo > hi for lo, hi in zip(self.u_min, self.u_max)):
            raise ValueError("input bounds not ordered (min <= max)")

    @property
    def u_lo(self) -> DoubleArray:
        return np.array(self.u_min, dtype=float)

    @property
    def u_hi(self) -> DoubleArray:
        return np.array(self.u_max, dtype=float)

    @property
    def x_lo(self) -> DoubleArray:
        return np.array(self.x_min, dtype=float)

    @property
    def x_hi(self) -> DoubleArray:
        return np.array(self.x_max, dtype=float)


StateLike = Union[VehicleState, DoubleArray, tuple, list]
InputLike = Union[ControlInput, DoubleArray, tuple, list]


def _state_tuple(state: StateLike):
    if isinstance(state, VehicleState):
        return (state.p_x, state.p_y, state.phi, state.v_x, state.v_y, state.omega)
    return tuple(float(v) for v in state)


def _input_tuple(u: InputLike):
    if isinstance(u, ControlInput):
        return (u.a, u.delta)
    return tuple(float(v) for v in u)


def _check(values, what):
    if not all(math.isfinite(v) for v in values):
        raise DynamicsDomainError(f"non-finite {what}: {values}")


def _denominators(vx, params, dt):
    dv = params.m * vx - dt * (params.k_f + params.k_r)
    dw = params.I_z * vx - dt * (params.l_f ** 2 * params.k_f + params.l_r ** 2 * params.k_r)
    if abs(dv) < DENOMINATOR_EPS or abs(dw) < DENOMINATOR_EPS:
        raise DegenerateDynamicsError(f"degenerate denominators ({dv:.3e}, {dw:.3e}) at v_x={vx}")
    return dv, dw


def _step_tuple(x, u, params: VehicleParams, dt: float):
    px, py, phi, vx, vy, w = x
    a, delta = u
    dv, dw = _denominators(vx, params, dt)
    m, kf, lf, Iz = params.m, params.k_f, params.l_f, params.I_z
    Lk = params.L_k
    c, s = math.cos(phi), math.sin(phi)
    return (
        px + dt * (vx * c - vy * s),
        py + dt * (vy * c + vx * s),
        phi + dt * w,
        vx + dt * a,
        (m * vx * vy + dt * Lk * w - dt * kf * delta * vx - dt * m * vx * vx * w) / dv,
        (Iz * vx * w + dt * Lk * vy - dt * lf * kf * delta * vx) / dw,
    )


def step(state: StateLike, u: InputLike, params: VehicleParams, dt: float):
    """Advance the vehicle one sample.

    Returns a VehicleState when given one, otherwise a float array.
    """
    if not dt > 0:
        raise ValueError(f"sampling time must be positive, got {dt}")
    x = _state_tuple(state)
    uu = _input_tuple(u)
    _check(x, "state")
    _check(uu, "input")
    nxt = _step_tuple(x, uu, params, dt)
    if isinstance(state, VehicleState):
        return VehicleState(*nxt)
    return np.array(nxt)


def step_jacobians(state: StateLike, u: InputLike, params: VehicleParams, dt: float):
    """Analytic partial derivatives of `step`.

    Returns
    -------
    A : (6, 6) array, d x' / d x
    B : (6, 2) array, d x' / d u
    """
    if not dt > 0:
        raise ValueError(f"sampling time must be positive, got {dt}")
    x = _state_tuple(state)
    uu = _input_tuple(u)
    _check(x, "state")
    _check(uu, "input")
    return _jacobians_tuple(x, uu, params, dt)


def _jacobians_tuple(x, u, params: VehicleParams, dt: float):
    px, py, phi, vx, vy, w = x
    a, delta = u
    dv, dw = _denominators(vx, params, dt)
    m, kf, lf, Iz = params.m, params.k_f, params.l_f, params.I_z
    Lk = params.L_k
    c, s = math.cos(phi), math.sin(phi)

    num_v = m * vx * vy + dt * Lk * w - dt * kf * delta * vx - dt * m * vx * vx * w
    num_w = Iz * vx * w + dt * Lk * vy - dt * lf * kf * delta * vx

    A = np.eye(NX)
    A[0, 2] = -dt * (vx * s + vy * c)
    A[0, 3] = dt * c
    A[0, 4] = -dt * s
    A[1, 2] = dt * (vx * c - vy * s)
    A[1, 3] = dt * s
    A[1, 4] = dt * c
    A[2, 5] = dt
    A[4, 3] = (m * vy - dt * kf * delta - 2.0 * dt * m * vx * w) / dv - num_v * m / (dv * dv)
    A[4, 4] = m * vx / dv
    A[4, 5] = (dt * Lk - dt * m * vx * vx) / dv
    A[5, 3] = (Iz * w - dt * lf * kf * delta) / dw - num_w * Iz / (dw * dw)
    A[5, 4] = dt * Lk / dw
    A[5, 5] = Iz * vx / dw

    B = np.zeros((NX, NU))
    B[3, 0] = dt
    B[4, 1] = -dt * kf * vx / dv
    B[5, 1] = -dt * lf * kf * vx / dw
    return A, B


def rollout(x0, controls, params: VehicleParams, dt: float) -> DoubleArray:
    """Propagate `x0` through a (N, 2) control sequence; returns the (N, 6) states x_1..x_N."""
    controls = np.asarray(controls, dtype=float)
    x = _state_tuple(x0)
    _check(x, "state")
    out = np.empty((len(controls), NX))
    for k, u in enumerate(controls):
        uu = (float(u[0]), float(u[1]))
        _check(uu, "input")
        x = _step_tuple(x, uu, params, dt)
        out[k] = x
    return out
