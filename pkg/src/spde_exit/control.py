"""
Controls, actions and two explicit control constructions.

The action of a path is ``1/2 int |u|_H^2 dt`` where ``u`` is the unique
control that makes the path solve the skeleton equation.  On the time grid
the control is recovered algebraically, mirroring the integrator:

    u_m = G(phi_mid)^{-1} [ (phi_{m+1} - phi_m)/dt - A phi_{m+1} - F(phi_mid) ]

with ``phi_mid`` the average of the two endpoints of the step.

:func:`feedback_connector` steers a second skeleton trajectory onto a first
one at unit sup-norm speed; :func:`reversed_path` runs the unperturbed flow
backwards in time and returns the control that realises it.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import NoMerge
from .grid import apply_A, h_norm, implicit_solve, semigroup_apply, sobolev_norm, sup_norm
from .model import apply_G, apply_G_inverse, eval_F
from .sim import ControlPath, SimConfig, TrajectoryPath, integrate_flow

MERGE_TOL = 1e-8


@dataclass
class ActionReport:
    """``total_action = sum(per_step)``; ``extras`` carries construction-specific terms."""

    total_action: float
    per_step: np.ndarray
    recovered_control: ControlPath
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        return {"total_action": float(self.total_action),
                "per_step": [float(v) for v in self.per_step],
                "n_steps": int(len(self.per_step)),
                "dt": float(self.recovered_control.dt),
                **{k: float(v) for k, v in self.extras.items()}}


def _states(path):
    return np.asarray(path.states if isinstance(path, TrajectoryPath) else path, dtype=float)


def recover_control(path, model, op, theta=1.0):
    """Control reproducing ``path`` on its time grid (one value per step).

    ``theta = 1`` applies ``A`` at the end of each step like the integrator;
    ``theta = 0.5`` centres it (second order in ``dt``, used by the minimum
    action method).
    """
    phi = _states(path)
    if len(phi) < 2:
        raise ValueError("path needs at least two states")
    dt = path.dt
    mid = 0.5 * (phi[1:] + phi[:-1])
    a_phi = apply_A(op, phi)
    drift = ((phi[1:] - phi[:-1]) / dt - theta * a_phi[1:] - (1 - theta) * a_phi[:-1]
             - eval_F(model, mid))
    return ControlPath(dt, apply_G_inverse(model, mid, drift))


def _report(u, spacing):
    per_step = 0.5 * u.dt * spacing * np.sum(u.values**2, axis=(-2, -1))
    return ActionReport(float(np.sum(per_step)), per_step, u)


def action(path, model, op, theta=1.0):
    """Discrete rate functional of ``path``; exact for its piecewise-constant control."""
    return _report(recover_control(path, model, op, theta), op.grid.spacing)


# -- feedback merging ----------------------------------------------------------------

class Connection:
    """Outcome of :func:`feedback_connector`.

    Unpacks as ``(v, merged, merge_time)``; ``energy_excess`` is
    ``1/2 |v|^2 - 1/2 |u|^2`` and ``distances[n]`` the sup-distance between
    the two trajectories after ``n`` steps.
    """

    def __init__(self, v, merged, merge_time, energy_excess, distances):
        self.v = v
        self.merged = merged
        self.merge_time = merge_time
        self.energy_excess = energy_excess
        self.distances = distances

    def __iter__(self):
        return iter((self.v, self.merged, self.merge_time))


def feedback_connector(x, y, u, model, op, cfg, delta_max=None):
    """Control ``v`` driving the skeleton from ``y`` onto the skeleton from ``x`` under ``u``.

    While the sup-distance ``d = |X_v - X_u|_E`` exceeds ``dt`` the control is

        v = G(X_v)^{-1} [ G(X_u) u + F(X_u) - F(X_v) - (X_v - X_u) / d ]

    which cancels the reaction mismatch and pulls the difference towards zero
    at unit speed; ``(I - dt A)^{-1}`` is a sup-norm contraction, so ``d``
    falls by at least ``dt`` per step.  The last stretch (``d <= dt``) and
    everything after merging use the exact matching control, with ``1/dt``
    in place of ``1/d``.  Raises :class:`NoMerge` if ``d`` is still above
    ``1e-8`` at time ``2 |x - y|_E``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    values = u.values if isinstance(u, ControlPath) else np.asarray(u, dtype=float)
    dt = cfg.dt
    n = min(len(values), cfg.n_steps)
    delta = float(sup_norm(y - x))
    if delta_max is not None and delta > delta_max:
        raise ValueError(f"|x - y|_E = {delta:.3g} exceeds delta_max = {delta_max:.3g}")
    if n * dt < delta:
        raise ValueError("control horizon shorter than the initial distance")
    xu, xv = x.copy(), y.copy()
    vs = np.empty((n,) + x.shape)
    states = [xv.copy()]
    dist = [delta]
    merge_time = 0.0 if delta < MERGE_TOL else None
    for k in range(n):
        d = xv - xu
        gap = dist[-1]
        if gap == 0.0:
            v = values[k].copy()
        else:
            fu = eval_F(model, xu)
            push = d / (gap if gap > dt else dt)
            v = apply_G_inverse(model, xv, apply_G(model, xu, values[k]) + fu
                                - eval_F(model, xv) - push)
        vs[k] = v
        xu = implicit_solve(op, dt, xu + dt * eval_F(model, xu) + dt * apply_G(model, xu, values[k]))
        xv = implicit_solve(op, dt, xv + dt * eval_F(model, xv) + dt * apply_G(model, xv, v))
        states.append(xv.copy())
        dist.append(float(sup_norm(xv - xu)))
        if merge_time is None:
            if dist[-1] < MERGE_TOL:
                merge_time = (k + 1) * dt
            elif (k + 1) * dt >= 2 * delta:
                raise NoMerge(f"distance {dist[-1]:.3g} at t={(k + 1) * dt:.4g} for delta={delta:.3g}")
    if merge_time is None:
        raise NoMerge(f"not merged within the control horizon (distance {dist[-1]:.3g})")
    h = op.grid.spacing
    excess = 0.5 * dt * h * (float(np.sum(vs**2)) - float(np.sum(values[:n]**2)))
    return Connection(ControlPath(dt, vs), TrajectoryPath(dt, np.array(states)), merge_time,
                      excess, np.array(dist))


# -- reversed flow -------------------------------------------------------------------

def reversed_path(x, T, model, op, cfg=None):
    """Time-reversed flow ``Y(t) = X^0_x(T - t)`` and its control.

    The control is ``u = -2 G(Y)^{-1} (A Y + F(Y))`` evaluated on the nodes;
    ``u.values[m]`` is its value at the left end of step ``m``.  The action is
    the trapezoid rule over the nodal values.  ``report.extras`` holds the
    two terms of the energy bound: ``h1_drop = |x|_{H^1}^2 - |S(T) x|_{H^1}^2``
    and ``growth = T (1 + sup_t |X^0_x(t)|_E^(1+rho))^2``.
    """
    if cfg is None:
        cfg = SimConfig(dt=1e-3, t_max=T)
    cfg = SimConfig(dt=cfg.dt, t_max=T, blowup_threshold=cfg.blowup_threshold,
                    stiffness_guard=cfg.stiffness_guard)
    x = np.asarray(x, dtype=float)
    flow = integrate_flow(x, model, op, cfg)
    path = flow.reversed()
    ys = path.states
    nodal = -2.0 * apply_G_inverse(model, ys, apply_A(op, ys) + eval_F(model, ys))
    sq = h_norm(nodal, op.grid) ** 2
    per_step = 0.25 * cfg.dt * (sq[1:] + sq[:-1])
    u = ControlPath(cfg.dt, nodal[:-1])
    h1_drop = sobolev_norm(x, 1.0, op) ** 2 - sobolev_norm(semigroup_apply(op, T, x), 1.0, op) ** 2
    peak = float(np.max(sup_norm(flow.states)))
    growth = T * (1.0 + peak ** (1.0 + model.rho)) ** 2
    report = ActionReport(float(np.sum(per_step)), per_step, u,
                          {"h1_drop": float(h1_drop), "growth": float(growth), "sup_flow": peak})
    return path, u, report


def reversed_path_bound(report, C):
    """Right-hand side ``C (h1_drop + growth)`` of the reversed-path energy bound."""
    return C * (report.extras["h1_drop"] + report.extras["growth"])
