import numpy as np
import pytest

from conftest import sine
from oracles import discrete_energy
from spde_exit.control import action, feedback_connector, recover_control, reversed_path
from spde_exit.grid import GridSpec, apply_A, build_operator, h_norm, sup_norm
from spde_exit.model import allen_cahn, apply_G_inverse, eval_F
from spde_exit.sim import ControlPath, SimConfig, TrajectoryPath, integrate_flow, integrate_skeleton


def _smooth_control(op, n, dt, amp=1.0):
    t = dt * np.arange(n)
    xi = op.grid.nodes
    shape = np.sin(np.pi * xi / op.grid.length) + 0.5 * np.sin(2 * np.pi * xi / op.grid.length)
    return ControlPath(dt, amp * np.cos(t)[:, None, None] * shape[None, None, :])


def test_flow_has_small_control(coarse):
    model, op = coarse
    for dt in (1e-2, 5e-3):
        flow = integrate_flow(sine(op.grid), model, op, SimConfig(dt=dt, t_max=1.0))
        u = recover_control(flow, model, op)
        assert np.max(h_norm(u.values, op.grid)) < 10 * dt


def test_flow_action_vanishes(reference):
    model, op = reference
    flow = integrate_flow(0.5 * sine(op.grid), model, op, SimConfig(dt=1e-3, t_max=2.0))
    assert action(flow, model, op).total_action <= 1e-4


def test_constant_path_control(coarse):
    model, op = coarse
    x = 0.3 * sine(op.grid, 2)
    path = TrajectoryPath(0.01, np.stack([x] * 5))
    u = recover_control(path, model, op)
    want = -apply_G_inverse(model, x, apply_A(op, x) + eval_F(model, x))
    assert np.allclose(u.values, want[None], atol=1e-10)


def test_action_report_invariants(coarse):
    model, op = coarse
    cfg = SimConfig(dt=1e-2, t_max=1.0)
    path = integrate_skeleton(sine(op.grid), _smooth_control(op, 100, 1e-2), model, op, cfg)
    rep = action(path, model, op)
    assert rep.total_action == pytest.approx(np.sum(rep.per_step), rel=1e-14)
    assert np.all(rep.per_step >= 0)
    d = rep.to_dict()
    assert d["n_steps"] == 100 and d["total_action"] == rep.total_action


def test_roundtrip_error_is_first_order(coarse):
    model, op = coarse
    errs = []
    for dt in (1e-2, 5e-3, 2.5e-3):
        cfg = SimConfig(dt=dt, t_max=1.0)
        u = _smooth_control(op, cfg.n_steps, dt, amp=2.0)
        path = integrate_skeleton(sine(op.grid), u, model, op, cfg)
        back = recover_control(path, model, op)
        errs.append(np.max(h_norm(back.values - u.values, op.grid)))
    assert 1.7 <= errs[0] / errs[1] <= 2.3 and 1.7 <= errs[1] / errs[2] <= 2.3


def test_appending_flow_leaves_action_unchanged(coarse):
    model, op = coarse
    dt = 1e-3
    cfg = SimConfig(dt=dt, t_max=0.5)
    path = integrate_skeleton(sine(op.grid), _smooth_control(op, 500, dt), model, op, cfg)
    tail = integrate_flow(path.final, model, op, cfg)
    joined = TrajectoryPath(dt, np.concatenate([path.states, tail.states[1:]]))
    a, b = action(path, model, op).total_action, action(joined, model, op).total_action
    flow_part = action(tail, model, op).total_action
    assert flow_part < 1e-6
    assert abs(b - a) <= 1e-6


def test_action_additive_under_concatenation(coarse):
    model, op = coarse
    dt = 1e-2
    cfg = SimConfig(dt=dt, t_max=1.0)
    path = integrate_skeleton(sine(op.grid), _smooth_control(op, 100, dt), model, op, cfg)
    first = TrajectoryPath(dt, path.states[:41])
    second = TrajectoryPath(dt, path.states[40:])
    total = action(path, model, op).total_action
    assert action(first, model, op).total_action + action(second, model, op).total_action == \
        pytest.approx(total, abs=1e-8)


def test_control_energy_scales_quadratically(coarse):
    _, op = coarse
    u = _smooth_control(op, 50, 0.01)
    for c in (0.5, 3.0):
        assert u.scaled(c).energy(op.grid.spacing) == pytest.approx(c**2 * u.energy(op.grid.spacing), rel=1e-13)


def test_rough_endpoint_action_grows_with_resolution():
    values = []
    for m in (49, 99, 199):
        model = allen_cahn()
        op = build_operator(model, GridSpec(5.0, m))
        saw = 0.1 * np.where(np.arange(m) % 2 == 0, 1.0, -1.0)[None]
        path = TrajectoryPath(0.1, np.linspace(0, 1, 11)[:, None, None] * saw[None])
        values.append(action(path, model, op).total_action)
    assert values[0] < values[1] < values[2]


def test_connector_identical_states(coarse):
    model, op = coarse
    cfg = SimConfig(dt=1e-3, t_max=0.2)
    u = _smooth_control(op, cfg.n_steps, cfg.dt)
    conn = feedback_connector(sine(op.grid), sine(op.grid), u, model, op, cfg)
    v, merged, merge_time = conn
    assert merge_time == 0.0
    assert np.allclose(v.values, u.values)
    assert conn.energy_excess == pytest.approx(0.0, abs=1e-12)


def test_connector_merges_at_unit_speed(reference):
    model, op = reference
    dt = 1e-3
    cfg = SimConfig(dt=dt, t_max=0.2)
    x = 0.5 * sine(op.grid)
    y = x + 0.05 * sine(op.grid, 3)
    u = ControlPath(dt, np.zeros((cfg.n_steps,) + op.grid.shape))
    conn = feedback_connector(x, y, u, model, op, cfg)
    assert conn.merge_time <= 0.05 + dt
    assert np.all(np.diff(conn.distances) <= 1e-12)
    target = integrate_flow(x, model, op, cfg)
    assert sup_norm(conn.merged.final - target.final) < 1e-8


def test_connector_rejects_large_distance(coarse):
    model, op = coarse
    cfg = SimConfig(dt=1e-3, t_max=0.05)
    u = ControlPath(1e-3, np.zeros((50,) + op.grid.shape))
    with pytest.raises(ValueError):
        feedback_connector(op.grid.zeros(), sine(op.grid), u, model, op, cfg, delta_max=0.5)
    with pytest.raises(ValueError):
        feedback_connector(op.grid.zeros(), sine(op.grid), u, model, op, cfg)


def test_reversed_path_at_equilibrium(reference, reference_equilibria):
    model, op = reference
    u = reference_equilibria[1]["stable1"].state
    path, ctrl, rep = reversed_path(u, 1.0, model, op)
    assert np.max(sup_norm(path.states - u)) < 1e-9
    assert rep.total_action < 1e-12


def test_reversed_path_energy_telescoping(reference):
    model, op = reference
    x = 0.05 * sine(op.grid) + 0.02 * sine(op.grid, 2)
    T = 8.0
    path, ctrl, rep = reversed_path(x, T, model, op)
    drop = discrete_energy(path.states[-1], 5.0) - discrete_energy(path.states[0], 5.0)
    assert rep.total_action == pytest.approx(2 * drop, rel=0.02)
    assert rep.extras["h1_drop"] > 0 and rep.extras["growth"] > 0


def test_reversed_control_reproduces_path(reference):
    model, op = reference
    x = 0.05 * sine(op.grid) + 0.02 * sine(op.grid, 2)
    path, ctrl, rep = reversed_path(x, 4.0, model, op)
    cfg = SimConfig(dt=ctrl.dt, t_max=4.0)
    again = integrate_skeleton(path.states[0], ctrl, model, op, cfg)
    err = np.max(sup_norm(again.states - path.states))
    assert err < 5e-3
