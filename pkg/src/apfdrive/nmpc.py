"""
Receding-horizon optimal control with potential-field costs.

The OCP is transcribed by single shooting: the N controls are the only
decision variables and states are obtained by rolling the bicycle model out
from the measured state, so the dynamics constraints hold by construction.
Box constraints on the controls are enforced exactly by projection; state
boxes enter as a quadratic penalty.

    J(U) = sum_t ||x_ref,t - x_t||^2_Q + sum_t ||u_t||^2_R
           + sum_{t>=2} ||u_t - u_{t-1}||^2_Rd + sum_t F(p_env,t, x_t)

The gradient dJ/dU is assembled by a reverse sweep through the rollout using
the analytic model Jacobians and the field gradient.
"""

import math
import time
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .dynamics import Bounds, VehicleParams, NX, NU, _check, _denominators, _state_tuple
from .potentials import EnvironmentSnapshot, HorizonField, PotentialConfig

DEFAULT_N = 10
DEFAULT_TS = 0.05


class InfeasibleStartError(RuntimeError):
    """The objective is not finite at the initial guess."""


@dataclass(frozen=True)
class MpcWeights:
    Q: Tuple[float, ...] = (12.0, 12.0, 0.5, 2.0, 0.1, 0.1)
    R: Tuple[float, ...] = (0.5, 10.0)
    R_d: Tuple[float, ...] = (1.0, 50.0)

    def __post_init__(self):
        for name, size in (("Q", NX), ("R", NU), ("R_d", NU)):
            vals = tuple(float(v) for v in getattr(self, name))
            if len(vals) != size:
                raise ValueError(f"MpcWeights.{name} needs {size} entries")
            if any(v < 0 or not math.isfinite(v) for v in vals):
                raise ValueError(f"MpcWeights.{name} must be finite and >= 0")
            object.__setattr__(self, name, vals)


@dataclass(frozen=True)
class SolverOptions:
    max_iter: int = 50
    max_line_search: int = 20
    tol: float = 1e-4  # projected-gradient infinity norm
    state_penalty: float = 1e3
    armijo: float = 1e-4


@dataclass(frozen=True, eq=False)
class OcpProblem:
    x0: np.ndarray
    reference: np.ndarray  # (N, 6)
    field: Optional[HorizonField]
    weights: MpcWeights = MpcWeights()
    bounds: Bounds = Bounds()
    params: VehicleParams = VehicleParams()
    T_s: float = DEFAULT_TS
    options: SolverOptions = SolverOptions()

    def __post_init__(self):
        x0 = np.asarray(self.x0, dtype=float).reshape(NX)
        ref = np.asarray(getattr(self.reference, "states", self.reference), dtype=float)
        if ref.ndim != 2 or ref.shape[1] != NX or len(ref) < 1:
            raise ValueError("reference must be (N >= 1, 6)")
        if self.field is not None and self.field.n != len(ref):
            raise ValueError("need one environment snapshot per horizon step")
        if not self.T_s > 0:
            raise ValueError("T_s must be > 0")
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "reference", ref)

    @classmethod
    def build(cls, x0, reference, snapshots: Optional[Sequence[EnvironmentSnapshot]] = None,
              pf_config: PotentialConfig = PotentialConfig(), **kw) -> "OcpProblem":
        fld = None
        if snapshots is not None and any(not s.is_empty for s in snapshots):
            fld = HorizonField(list(snapshots), pf_config)
        return cls(x0, reference, fld, **kw)

    @property
    def N(self) -> int:
        return len(self.reference)


@dataclass(frozen=True, eq=False)
class OcpSolution:
    controls: np.ndarray  # (N, 2)
    states: np.ndarray  # (N, 6)
    cost: float  # objective incl. state-bound penalty
    iterations: int
    converged: bool  # optimal, or stopped at the iteration cap
    solve_time_ms: float
    start_cost: float
    penalty: float = 0.0
    cost_trace: Tuple[float, ...] = ()
    optimal: bool = False  # projected-gradient norm below tolerance


# --- rollout + gradient -------------------------------------------------------------


def _rollout(x0, U, params: VehicleParams, dt: float, partials: bool):
    """Roll out; optionally keep the non-trivial Jacobian entries per step."""
    m, kf, kr, lf, lr, Iz = params.m, params.k_f, params.k_r, params.l_f, params.l_r, params.I_z
    Lk = params.L_k
    ksum = kf + kr
    kmom = lf * lf * kf + lr * lr * kr
    px, py, phi, vx, vy, w = x0
    X = np.empty((len(U), NX))
    J = [] if partials else None
    for k in range(len(U)):
        a, delta = float(U[k, 0]), float(U[k, 1])
        dv = m * vx - dt * ksum
        dw = Iz * vx - dt * kmom
        if abs(dv) < 1e-9 or abs(dw) < 1e-9:
            _denominators(vx, params, dt)
        c, s = math.cos(phi), math.sin(phi)
        num_v = m * vx * vy + dt * Lk * w - dt * kf * delta * vx - dt * m * vx * vx * w
        num_w = Iz * vx * w + dt * Lk * vy - dt * lf * kf * delta * vx
        if partials:
            J.append((
                -dt * (vx * s + vy * c), dt * c, -dt * s,  # A02 A03 A04
                dt * (vx * c - vy * s), dt * s, dt * c,  # A12 A13 A14
                (m * vy - dt * kf * delta - 2.0 * dt * m * vx * w) / dv - num_v * m / (dv * dv),  # A43
                m * vx / dv, (dt * Lk - dt * m * vx * vx) / dv,  # A44 A45
                (Iz * w - dt * lf * kf * delta) / dw - num_w * Iz / (dw * dw),  # A53
                dt * Lk / dw, Iz * vx / dw,  # A54 A55
                -dt * kf * vx / dv, -dt * lf * kf * vx / dw,  # B41 B51
            ))
        px, py, phi, vx, vy, w = (
            px + dt * (vx * c - vy * s),
            py + dt * (vy * c + vx * s),
            phi + dt * w,
            vx + dt * a,
            num_v / dv,
            num_w / dw,
        )
        X[k] = (px, py, phi, vx, vy, w)
    return X, J


def _objective(problem: OcpProblem, U, grad: bool = True):
    """Objective (Eq.-2 cost + state penalty) and, optionally, dJ/dU.

    Returns (total, eq2_cost, penalty, gradient or None, states).
    """
    U = np.asarray(U, dtype=float).reshape(problem.N, NU)
    dt = problem.T_s
    X, J = _rollout(tuple(problem.x0), U, problem.params, dt, grad)
    q = np.asarray(problem.weights.Q)
    r = np.asarray(problem.weights.R)
    rd = np.asarray(problem.weights.R_d)
    E = X - problem.reference
    track = float((E * E * q).sum())
    ctrl = float((U * U * r).sum())
    dU = U[1:] - U[:-1]
    rate = float((dU * dU * rd).sum())
    lo, hi = problem.bounds.x_lo, problem.bounds.x_hi
    below = np.minimum(X - lo, 0.0)
    above = np.maximum(X - hi, 0.0)
    w_pen = problem.options.state_penalty
    penalty = w_pen * float((below * below + above * above).sum())
    if problem.field is not None:
        F, gF = problem.field.evaluate(X, with_grad=grad)
    else:
        F, gF = 0.0, None
    cost = track + ctrl + rate + F
    total = cost + penalty
    if not grad:
        return total, cost, penalty, None, X

    lx = 2.0 * q * E + 2.0 * w_pen * (below + above)
    if gF is not None:
        lx = lx + gF
    gU = 2.0 * r * U
    gU[1:] += 2.0 * rd * dU
    gU[:-1] -= 2.0 * rd * dU

    N = problem.N
    l0, l1, l2, l3, l4, l5 = lx[N - 1]
    for k in range(N - 1, -1, -1):
        A02, A03, A04, A12, A13, A14, A43, A44, A45, A53, A54, A55, B41, B51 = J[k]
        gU[k, 0] += dt * l3
        gU[k, 1] += B41 * l4 + B51 * l5
        if k == 0:
            break
        # lambda_{k-1} = l_x(x_{k-1}) + A_k^T lambda_k
        nl = lx[k - 1]
        l0, l1, l2, l3, l4, l5 = (
            nl[0] + l0,
            nl[1] + l1,
            nl[2] + l2 + A02 * l0 + A12 * l1,
            nl[3] + l3 + A03 * l0 + A13 * l1 + A43 * l4 + A53 * l5,
            nl[4] + A04 * l0 + A14 * l1 + A44 * l4 + A54 * l5,
            nl[5] + dt * l2 + A45 * l4 + A55 * l5,
        )
    return total, cost, penalty, gU, X


def evaluate_cost(problem: OcpProblem, controls) -> float:
    """Cost of a control sequence: tracking + energy + rate + field terms."""
    U = np.asarray(controls, dtype=float).reshape(problem.N, NU)
    for u in U:
        _check(tuple(float(v) for v in u), "input")
    _check(_state_tuple(problem.x0), "state")
    return _objective(problem, U, grad=False)[1]


def objective_and_gradient(problem: OcpProblem, controls):
    """Solver objective (cost + state-bound penalty) and its gradient w.r.t. the (N, 2) controls."""
    total, _, _, g, _ = _objective(problem, controls, grad=True)
    return total, g


# --- solver -------------------------------------------------------------------------


def shift_warm_start(previous) -> np.ndarray:
    """Drop the first control and repeat the last one."""
    U = np.asarray(getattr(previous, "controls", previous), dtype=float)
    if len(U) <= 1:
        return U.copy()
    return np.vstack([U[1:], U[-1:]])


def solve(problem: OcpProblem, warm_start=None) -> OcpSolution:
    """Projected BFGS with Armijo backtracking along the projection arc.

    Never returns a point with a higher objective than the (clipped) start.
    """
    t_start = time.perf_counter()
    opts = problem.options
    N = problem.N
    lo = np.tile(problem.bounds.u_lo, N)
    hi = np.tile(problem.bounds.u_hi, N)
    if warm_start is None:
        z = np.zeros(N * NU)
    else:
        z = np.asarray(warm_start, dtype=float).reshape(N * NU).copy()
    z = np.clip(z, lo, hi)

    def obj(zz):
        try:
            total, _, _, g, _ = _objective(problem, zz.reshape(N, NU), grad=True)
        except ArithmeticError:
            return math.inf, None
        if not math.isfinite(total) or not np.all(np.isfinite(g)):
            return math.inf, None
        return total, g.ravel()

    f, g = obj(z)
    if not math.isfinite(f):
        raise InfeasibleStartError("objective not finite at the initial controls")
    f_start = f
    trace = [f]
    n = z.size
    H = np.eye(n) * min(1.0, 1.0 / max(float(np.max(np.abs(g))), 1e-12))
    fresh = True
    optimal = False
    it = 0
    while it < opts.max_iter:
        pg = z - np.clip(z - g, lo, hi)
        if float(np.max(np.abs(pg))) < opts.tol:
            optimal = True
            break
        it += 1
        eps = 1e-10
        active = ((z <= lo + eps) & (g > 0)) | ((z >= hi - eps) & (g < 0))
        free = ~active
        d = np.zeros(n)
        Hf = H[np.ix_(free, free)]
        d[free] = -Hf @ g[free]
        if float(d @ g) >= 0.0:
            d = np.where(free, -g, 0.0) * H.diagonal().mean()
        alpha = 1.0
        accepted = False
        for _ in range(opts.max_line_search):
            zt = np.clip(z + alpha * d, lo, hi)
            ft, gt = obj(zt)
            if math.isfinite(ft) and ft <= f + opts.armijo * float(g @ (zt - z)):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            if fresh:
                break
            H = np.eye(n) * min(1.0, 1.0 / max(float(np.max(np.abs(g))), 1e-12))
            fresh = True
            continue
        s = zt - z
        y = gt - g
        sy = float(s @ y)
        if sy > 1e-12:
            if fresh:
                H = np.eye(n) * (sy / float(y @ y))
            rho = 1.0 / sy
            Hy = H @ y
            H = H + rho * ((1.0 + rho * float(y @ Hy)) * np.outer(s, s) - np.outer(Hy, s) - np.outer(s, Hy))
            fresh = False
        z, f, g = zt, ft, gt
        trace.append(f)

    U = z.reshape(N, NU)
    total, cost, penalty, _, X = _objective(problem, U, grad=False)
    elapsed = (time.perf_counter() - t_start) * 1e3
    converged = optimal or it >= opts.max_iter
    return OcpSolution(U.copy(), X, total, it, converged, elapsed, f_start, penalty, tuple(trace), optimal)
