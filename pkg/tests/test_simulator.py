import dataclasses
import math

import numpy as np
import pytest

from apfdrive.config import load_config, parse_config
from apfdrive.dynamics import ControlInput, VehicleState
from apfdrive.potentials import CLASSES, field_terms
from apfdrive.road import RoadModel, query_environment
from apfdrive.simulator import (
    LOG_COLUMNS, SvScript, SvTrack, Violations, World, detect_collision, detect_violations, log_metrics,
    read_log_csv, run_trial, tick,
)

TS = 0.05
SV0 = (0.0, 0.0, 0.0)


def short(name, budget, **kw):
    return dataclasses.replace(load_config(name), time_budget=budget, **kw)


# --- world stepping ------------------------------------------------------------------


def test_tick_at_rest_is_identity():
    road = load_config("straight").road_model
    w = World(0.0, VehicleState(5.0, 1.0, 0.3, 0.0, 0.0, 0.0), ControlInput(), (), road)
    w2 = tick(w, TS)
    assert w2.ev == w.ev and w2.time == pytest.approx(TS) and w2.vehicles() == ()


def test_constant_speed_sv_advances_half_a_meter_per_tick():
    track = SvTrack(SvScript("constant_speed", SV0, speed=10.0))
    road = load_config("straight").road_model
    w = World(0.0, VehicleState(0, 0, 0, 0, 0, 0), ControlInput(), (track,), road)
    xs = []
    for _ in range(4):
        xs.append(w.vehicles()[0].p_x)
        w = tick(w, TS)
    np.testing.assert_allclose(np.diff(xs), 0.5, atol=1e-12)


def test_light_turns_red_at_three_seconds():
    road = load_config("crossroad").road_model
    w = World(2.95, VehicleState(0, 0, 0, 0, 0, 0), ControlInput(), (), road)
    assert w.light_states() == (0.0,)
    assert tick(w, TS).light_states() == (1.0,)


def test_piecewise_speed_distance_is_exact():
    track = SvTrack(SvScript("piecewise_speed", SV0, schedule=((0, 10.0), (2, 10.0), (4, 6.0))))
    assert track.distance(2.0) == pytest.approx(20.0)
    assert track.distance(4.0) == pytest.approx(20.0 + 16.0)  # trapezoid 10 -> 6 over 2 s
    assert track.distance(5.0) == pytest.approx(42.0)
    assert track.speed_at(3.0) == pytest.approx(8.0)


def test_lane_follow_wraps_on_closed_path():
    th = np.linspace(0, 2 * math.pi, 73)[:-1]
    circle = np.column_stack([40 * np.cos(th), 40 * np.sin(th)])
    track = SvTrack(SvScript("lane_follow", (40.0, 0.0, math.pi / 2), speed=5.0, path=circle, closed=True))
    lap = track.poly.length / 5.0
    a, b = track.state(1.0), track.state(1.0 + lap)
    assert (a.p_x, a.p_y) == pytest.approx((b.p_x, b.p_y), abs=1e-9)
    assert math.hypot(a.p_x, a.p_y) == pytest.approx(40.0, abs=0.05)


def test_sv_jitter_is_seeded():
    script = SvScript("constant_speed", SV0, speed=5.0, jitter_position=3.0, jitter_speed=1.0)
    a = SvTrack(script, np.random.default_rng(4)).state(2.0)
    b = SvTrack(script, np.random.default_rng(4)).state(2.0)
    c = SvTrack(script, np.random.default_rng(5)).state(2.0)
    assert a == b and a != c
    assert abs(SvTrack(script, np.random.default_rng(4)).state(0.0).p_x) <= 3.0


def test_sv_script_validation():
    with pytest.raises(ValueError):
        SvScript("teleport", SV0)
    with pytest.raises(ValueError):
        SvScript("constant_speed", SV0, speed=-1)
    with pytest.raises(ValueError):
        SvScript("piecewise_speed", SV0, schedule=((1, 5), (1, 6)))
    with pytest.raises(ValueError):
        SvScript("lane_follow", SV0, speed=3)


# --- collision and rule checks -------------------------------------------------------


def sv_at(x, y=0.0, h=0.0):
    return SvTrack(SvScript("constant_speed", (x, y, h))).state(0.0)


def test_collision_examples():
    assert detect_collision((0, 0, 0), [sv_at(20.0)]) == (False, None)
    assert detect_collision((0, 0, 0), [sv_at(0.0)]) == (True, 0)
    eps = 1e-9
    assert detect_collision((0, 0, 0), [sv_at(4.8 + eps)])[0] is False
    assert detect_collision((0, 0, 0), [sv_at(4.8 - eps)])[0] is True
    assert detect_collision((0, 0, 0), [sv_at(30.0), sv_at(-4.0)]) == (True, 1)


def test_no_violations_mid_lane():
    road = load_config("straight").road_model
    v = Violations()
    prev = VehicleState(0, 0, 0, 10, 0, 0)
    for k in range(1, 200):
        cur = VehicleState(0.5 * k, 0, 0, 10, 0, 0)
        v = v | detect_violations(prev, cur, road, k * TS)
        prev = cur
    assert v == Violations()


def test_crossing_solid_line_is_flagged():
    road = load_config("straight").road_model
    prev = VehicleState(10, 5.2, 0.1, 10, 0, 0)
    assert not detect_violations(VehicleState(9.5, 5.1, 0.1, 10, 0, 0), prev, road, 1.0).non_traversable
    cur = VehicleState(10.5, 5.3, 0.1, 10, 0, 0)
    assert detect_violations(prev, cur, road, 1.0).non_traversable


def test_lane_change_counts_broken_line_crossing():
    road = load_config("straight").road_model
    v = detect_violations(VehicleState(10, 1.7, 0.1, 10, 0, 0), VehicleState(10.5, 1.8, 0.1, 10, 0, 0), road, 1.0)
    assert v.traversable_crossings == 1 and not v.non_traversable


def test_red_light_violation_timing():
    road = load_config("crossroad").road_model  # green 3 s, then red; stop line at y = -8 heading north
    front = 2.4

    def crossing_at(t):
        prev = VehicleState(1.75, -8.0 - front - 0.2, math.pi / 2, 8, 0, 0)
        cur = VehicleState(1.75, -8.0 - front + 0.2, math.pi / 2, 8, 0, 0)
        return detect_violations(prev, cur, road, t).red_light

    assert crossing_at(3.2)  # 0.2 s after red onset
    assert not crossing_at(2.8)
    # a vehicle in the crossing lane is not governed by this light
    prev = VehicleState(-20, 1.75, 0.0, 8, 0, 0)
    cur = VehicleState(-19.5, 1.75, 0.0, 8, 0, 0)
    assert not detect_violations(prev, cur, road, 5.0).red_light


def test_log_metrics_definitions():
    dp, dv, dphi = log_metrics((3, 4, 3.1, 10, 0, 0), (0, 0, -3.1, 12, 0, 0))
    assert dp == 5.0 and dv == 2.0
    assert dphi == pytest.approx(2 * math.pi - 6.2)


# --- closed loop ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def fig2_trial():
    cfg = short("fig2_layout", 3.0)
    return cfg, run_trial(cfg, 0, record_timing=False)


def test_fig2_trial_log_shape(fig2_trial):
    cfg, (log, outcome) = fig2_trial
    assert log.steps == int(round(cfg.time_budget / cfg.T_s))
    assert outcome.reason == "time_budget" and outcome.success
    assert np.all(log.dp >= 0) and np.all(log.dv >= 0) and np.all(log.dphi >= 0)
    bounds = cfg.bounds
    assert np.all(log.controls >= bounds.u_min) and np.all(log.controls <= bounds.u_max)


def test_log_is_consistent_with_world(fig2_trial):
    cfg, (log, _) = fig2_trial
    road = cfg.road_model
    rng = np.random.default_rng(0)
    tracks = tuple(SvTrack(s, rng) for s in cfg.svs_scripts)
    for k in range(log.steps):
        t = log.t[k]
        x = log.states[k]
        svs = tuple(tr.state(t) for tr in tracks)
        env = query_environment(road, x, t, vehicles=svs, cfg=cfg.potentials)
        terms = field_terms(env, x, cfg.potentials)
        np.testing.assert_allclose(log.pf[k], [terms[c] for c in CLASSES], rtol=1e-9, atol=1e-9)
        np.testing.assert_allclose((log.dp[k], log.dv[k], log.dphi[k]), log_metrics(x, log.refs[k]), atol=1e-9)
        assert log.collision[k] == detect_collision(x[:3], svs, cfg.potentials.r_V)[0]


def test_csv_round_trip(fig2_trial):
    _, (log, _) = fig2_trial
    data = read_log_csv(log.to_csv())
    assert tuple(data) == LOG_COLUMNS
    assert data["p_x"].tobytes() == log.states[:, 0].tobytes()
    assert data["F_TL"].tobytes() == log.pf[:, 3].tobytes()
    assert data["dphi"].tobytes() == log.dphi.tobytes()


def test_trial_is_deterministic():
    cfg = short("multilane_acc", 2.0)
    a, oa = run_trial(cfg, 3, record_timing=False)
    b, ob = run_trial(cfg, 3, record_timing=False)
    assert a.to_csv(False) == b.to_csv(False)
    assert oa == ob
    c, _ = run_trial(cfg, 4, record_timing=False)
    assert c.to_csv(False) != a.to_csv(False)


def test_straight_road_regulation():
    cfg = short("straight", 6.0)
    log, outcome = run_trial(cfg, 0)
    assert outcome.success and not outcome.violations.non_traversable
    settled = log.t >= 3.0
    assert np.mean(log.dp[settled]) < 0.1


HEAD_ON = """
name: head_on
road:
  lane_width: 3.5
  lanes:
    - {id: 0, geometry: [line: [0.0, 0.0, 200.0, 0.0]]}
  markings:
    - {kind: non_traversable, side: left, geometry: [line: [-10.0, 1.75, 210.0, 1.75]]}
    - {kind: non_traversable, side: right, geometry: [line: [-10.0, -1.75, 210.0, -1.75]]}
potentials: {a_V: 2000.0}
ev: {initial: [0.0, 0.0, 0.0, 10.0, 0.0, 0.0], start_lane: 0, goal_lane: 0}
v_ref: 10.0
svs:
  - {behavior: constant_speed, pose: [60.0, 0.0, 3.141592653589793], speed: 8.0}
time_budget: 8.0
"""


def test_head_on_without_escape_is_an_outcome_not_a_crash():
    cfg = parse_config(HEAD_ON)
    log, outcome = run_trial(cfg, 0)
    assert outcome.collided or outcome.reason in ("time_budget", "goal")
    # success is exactly the absence of any collision flag in the log
    assert outcome.success == (not log.collision.any())
    if outcome.collided:
        assert log.collision[-1] and not log.collision[:-1].any()


def test_abort_is_a_failed_outcome(monkeypatch):
    import apfdrive.simulator as sim
    from apfdrive.nmpc import InfeasibleStartError

    def boom(*a, **k):
        raise InfeasibleStartError("forced")

    monkeypatch.setattr(sim, "solve", boom)
    log, outcome = run_trial(short("straight", 1.0), 0)
    assert not outcome.success and outcome.reason.startswith("aborted") and log.steps == 0
