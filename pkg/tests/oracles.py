"""Independent reference implementations used as test oracles.

Nothing here calls the code paths it is used to check: the dynamics oracle
runs in 40-digit mpmath, the field oracle is a plain numpy transcription of
the potential formulas, and route/solver oracles are exhaustive searches.
"""

import itertools
import math

import mpmath
import numpy as np

# --- dynamics ------------------------------------------------------------------------


def mp_step(x, u, p, dt, dps=40):
    """One backward-Euler bicycle step evaluated in high precision."""
    with mpmath.workdps(dps):
        px, py, phi, vx, vy, w = (mpmath.mpf(float(v)) for v in x)
        a, d = (mpmath.mpf(float(v)) for v in u)
        m, lf, lr = mpmath.mpf(p.m), mpmath.mpf(p.l_f), mpmath.mpf(p.l_r)
        kf, kr, Iz = mpmath.mpf(p.k_f), mpmath.mpf(p.k_r), mpmath.mpf(p.I_z)
        T = mpmath.mpf(dt)
        Lk = lf * kf - lr * kr
        return [
            px + T * (vx * mpmath.cos(phi) - vy * mpmath.sin(phi)),
            py + T * (vy * mpmath.cos(phi) + vx * mpmath.sin(phi)),
            phi + T * w,
            vx + T * a,
            (m * vx * vy + T * Lk * w - T * kf * d * vx - T * m * vx ** 2 * w) / (m * vx - T * (kf + kr)),
            (Iz * vx * w + T * Lk * vy - T * lf * kf * d * vx) / (Iz * vx - T * (lf ** 2 * kf + lr ** 2 * kr)),
        ]


def central_diff(f, x, rel_h=1e-6):
    """Central finite-difference Jacobian of f: R^n -> R^m (or scalar)."""
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(np.asarray(f(x), dtype=float))
    J = np.zeros((f0.size, x.size))
    for i in range(x.size):
        h = rel_h * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        J[:, i] = (np.atleast_1d(f(xp)) - np.atleast_1d(f(xm))) / (2.0 * h)
    return J


def np_step(X, U, p, dt):
    """Vectorized step over rows of X (M, 6) and U (M, 2)."""
    px, py, phi, vx, vy, w = X.T
    a, d = U.T
    Lk = p.l_f * p.k_f - p.l_r * p.k_r
    out = np.empty_like(X)
    out[:, 0] = px + dt * (vx * np.cos(phi) - vy * np.sin(phi))
    out[:, 1] = py + dt * (vy * np.cos(phi) + vx * np.sin(phi))
    out[:, 2] = phi + dt * w
    out[:, 3] = vx + dt * a
    out[:, 4] = (p.m * vx * vy + dt * Lk * w - dt * p.k_f * d * vx - dt * p.m * vx ** 2 * w) / (
        p.m * vx - dt * (p.k_f + p.k_r))
    out[:, 5] = (p.I_z * vx * w + dt * Lk * vy - dt * p.l_f * p.k_f * d * vx) / (
        p.I_z * vx - dt * (p.l_f ** 2 * p.k_f + p.l_r ** 2 * p.k_r))
    return out


# --- potential field -----------------------------------------------------------------


def np_field(env, X, cfg):
    """Field value for each row of X (M, >=3) in a single snapshot, by direct formulas."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    px, py, phi = X[:, 0], X[:, 1], X[:, 2]
    F = np.zeros(len(X))
    for mk in env.markings:
        b = mk.ref.beta
        lateral = (px - mk.ref.x) * -math.sin(b) + (py - mk.ref.y) * math.cos(b)
        if mk.side.value == "left":
            s = mk.lane_width / 2 - lateral
        else:
            s = lateral + mk.lane_width / 2
        if mk.kind.value == "non_traversable":
            e_s = cfg.a_NR / cfg.nr_outer ** cfg.b_NR
            m_s = cfg.a_NR / cfg.nr_inner ** cfg.b_NR - e_s
            mid = cfg.a_NR / np.where((s > cfg.nr_inner) & (s < cfg.nr_outer), s, 1.0) ** cfg.b_NR - e_s
            F += np.where(s <= cfg.nr_inner, m_s, np.where(s < cfg.nr_outer, mid, 0.0))
        else:
            F += np.where(s < cfg.b_TR, cfg.a_TR * (s - cfg.b_TR) ** 2, 0.0)
    r = cfg.r_V
    for sv in env.vehicles:
        for so in (1.0, -1.0):
            ox = sv.p_x + so * r * math.cos(sv.heading)
            oy = sv.p_y + so * r * math.sin(sv.heading)
            for se in (1.0, -1.0):
                qx = px + se * r * np.cos(phi)
                qy = py + se * r * np.sin(phi)
                d2 = np.maximum((qx - ox) ** 2 + (qy - oy) ** 2, cfg.vehicle_d2_floor)
                F += cfg.a_V / d2 ** cfg.b_V
    for li in env.lights:
        if li.c_tl == 0:
            continue
        b = li.stop.beta
        fx = px + cfg.front_offset * np.cos(phi)
        fy = py + cfg.front_offset * np.sin(phi)
        d_x = np.maximum((li.stop.x - fx) * math.cos(b) + (li.stop.y - fy) * math.sin(b), cfg.tl_dx_min)
        e = (px - li.stop.x) * -math.sin(b) + (py - li.stop.y) * math.cos(b)
        d_yl = np.maximum(li.lane_width / 2 - e, cfg.tl_dy_min)
        d_yr = np.maximum(li.lane_width / 2 + e, cfg.tl_dy_min)
        F += li.c_tl * (cfg.a_TL1 / d_x + cfg.a_TL2 / d_yl + cfg.a_TL2 / d_yr)
    return F


def np_objective(x0, U, ref, snapshots, cfg, weights, bounds, params, dt, penalty=1e3):
    """Objective (tracking + effort + rate + field + state-box penalty) for a batch.

    U has shape (M, N, 2); returns (M,) costs.
    """
    M, N, _ = U.shape
    X = np.tile(np.asarray(x0, dtype=float), (M, 1))
    Q, R, Rd = np.array(weights.Q), np.array(weights.R), np.array(weights.R_d)
    lo, hi = np.array(bounds.x_min), np.array(bounds.x_max)
    J = np.zeros(M)
    for k in range(N):
        X = np_step(X, U[:, k], params, dt)
        J += ((ref[k] - X) ** 2 * Q).sum(axis=1)
        J += (U[:, k] ** 2 * R).sum(axis=1)
        if k > 0:
            J += ((U[:, k] - U[:, k - 1]) ** 2 * Rd).sum(axis=1)
        if snapshots is not None:
            J += np_field(snapshots[k], X, cfg)
        over = np.maximum(X - hi, 0.0) + np.maximum(lo - X, 0.0)
        J += penalty * (over ** 2).sum(axis=1)
    return J


def grid_minimum(x0, ref, snapshots, cfg, weights, bounds, params, dt, n=21):
    """Exhaustive minimum over an n x n control grid per step (N = 2 only)."""
    a = np.linspace(bounds.u_min[0], bounds.u_max[0], n)
    d = np.linspace(bounds.u_min[1], bounds.u_max[1], n)
    per_step = np.array(list(itertools.product(a, d)))
    combos = np.array(list(itertools.product(range(len(per_step)), repeat=2)))
    U = np.stack([per_step[combos[:, 0]], per_step[combos[:, 1]]], axis=1)
    J = np_objective(x0, U, ref, snapshots, cfg, weights, bounds, params, dt)
    i = int(np.argmin(J))
    return float(J[i]), U[i]


# --- routing -------------------------------------------------------------------------


def brute_force_route(road, start, goal):
    """Minimum entered-lane-length over all simple paths (depth-first enumeration)."""
    best = [math.inf, None]

    def dfs(node, cost, path):
        if cost >= best[0]:
            return
        if node == goal:
            best[0], best[1] = cost, list(path)
            return
        for m in road.lane(node).neighbors():
            if m in path:
                continue
            path.append(m)
            dfs(m, cost + road.lane(m).length, path)
            path.pop()

    dfs(start, 0.0, [start])
    return best[0], best[1]
