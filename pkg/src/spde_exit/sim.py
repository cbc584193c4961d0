"""
Time integration of the stochastic equation, the unperturbed flow and the
controlled skeleton equation.

All three share one linear-implicit Euler step

    (I - dt A) X_{n+1} = X_n + dt F(X_n) + G(X_n) drive_n

with ``drive_n = sqrt(eps) dW_n`` for the noisy equation, ``dt u_n`` for the
skeleton and nothing for the flow.  States may carry leading batch axes.

When ``dt`` times a bound on the local Lipschitz constant of ``f`` exceeds
``STIFF_LIMIT`` the step is split into ``2^k`` equal substeps, each receiving
an equal share of the drive; this only triggers far from the attractors
(e.g. starting at ``|x|_E = 1000``).
"""
from dataclasses import dataclass
import math

import numpy as np

from .errors import BlowUp, NonFiniteOutput
from .grid import implicit_solve, sup_norm
from .model import apply_G, eval_F
from .noise import BatchNoise, NoiseStream, sample_increment

STIFF_LIMIT = 0.5


@dataclass
class SimConfig:
    """Time stepping parameters; ``epsilon`` is the noise intensity."""

    dt: float
    t_max: float
    epsilon: float = 0.0
    blowup_threshold: float = 1e6
    observer_stride: int = 1
    stiffness_guard: bool = True

    def __post_init__(self):
        if not (self.dt > 0 and self.t_max > 0):
            raise ValueError("dt and t_max must be positive")
        if self.dt > self.t_max:
            raise ValueError("dt must not exceed t_max")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.observer_stride < 1:
            raise ValueError("observer_stride must be >= 1")

    @property
    def n_steps(self):
        return int(round(self.t_max / self.dt))


def default_dt(grid, epsilon=0.0):
    """``min(0.1 h^2, 1e-3)`` for noisy runs, ``1e-3`` for the flow."""
    if epsilon > 0:
        return min(0.1 * grid.spacing**2, 1e-3)
    return 1e-3


@dataclass
class TrajectoryPath:
    """States ``states[n]`` at times ``t0 + n * dt`` (uniform grid)."""

    dt: float
    states: np.ndarray
    t0: float = 0.0

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(len(self.states))

    @property
    def n_steps(self):
        return len(self.states) - 1

    @property
    def t_final(self):
        return self.t0 + self.dt * self.n_steps

    @property
    def final(self):
        return self.states[-1]

    def reversed(self):
        return TrajectoryPath(self.dt, self.states[::-1].copy(), self.t0)


@dataclass
class ControlPath:
    """Piecewise-constant control: ``values[n]`` acts on ``[n dt, (n+1) dt)``."""

    dt: float
    values: np.ndarray

    @property
    def n_steps(self):
        return len(self.values)

    @property
    def t_max(self):
        return self.dt * self.n_steps

    def energy(self, spacing):
        """``1/2 int |u|_H^2 dt``."""
        return 0.5 * self.dt * spacing * float(np.sum(self.values**2))

    def scaled(self, c):
        return ControlPath(self.dt, c * self.values)


def _substeps(model, x, dt):
    radius = float(np.max(sup_norm(x))) if x.size else 0.0
    lip = model.reaction.lipschitz_bound(radius)
    ratio = dt * lip / STIFF_LIMIT
    if not np.isfinite(ratio):
        raise NonFiniteOutput("state is not finite")
    if ratio <= 1.0:
        return 1
    return 2 ** int(math.ceil(math.log2(ratio)))


def advance(x, model, op, dt, drive=None, guard=True):
    """One linear-implicit step; ``drive`` enters as ``G(X_n) drive``."""
    n_sub = _substeps(model, x, dt) if guard else 1
    if n_sub == 1:
        rhs = x + dt * eval_F(model, x)
        if drive is not None:
            rhs += apply_G(model, x, drive)
        return implicit_solve(op, dt, rhs)
    h = dt / n_sub
    part = None if drive is None else drive / n_sub
    for _ in range(n_sub):
        rhs = x + h * eval_F(model, x)
        if part is not None:
            rhs += apply_G(model, x, part)
        x = implicit_solve(op, h, rhs)
    return x


def _check_blowup(x, t, threshold):
    norm = float(np.max(sup_norm(x))) if x.size else 0.0
    if not norm <= threshold:
        raise BlowUp(t, norm, threshold)


def _run(x0, model, op, cfg, drives, observer, record):
    x = np.array(x0, dtype=float)
    stride = cfg.observer_stride
    states = [x.copy()]
    t = 0.0
    if observer is None or not observer(0.0, x):
        for k in range(cfg.n_steps):
            try:
                x = advance(x, model, op, cfg.dt, drives(k, x), cfg.stiffness_guard)
            except NonFiniteOutput:
                raise BlowUp((k + 1) * cfg.dt, np.inf, cfg.blowup_threshold) from None
            t = (k + 1) * cfg.dt
            _check_blowup(x, t, cfg.blowup_threshold)
            if (k + 1) % stride == 0:
                if record:
                    states.append(x.copy())
                if observer is not None and observer(t, x):
                    break
    if not record:
        return TrajectoryPath(t if t > 0 else cfg.dt, np.array([states[0], x]))
    return TrajectoryPath(cfg.dt * stride, np.array(states))


def _noise_drives(x0, op, cfg, stream):
    if cfg.epsilon == 0 or stream is None:
        return lambda k, x: None, lambda: None
    amp = math.sqrt(cfg.epsilon)
    if isinstance(stream, NoiseStream):
        return lambda k, x: amp * sample_increment(stream, op.grid, cfg.dt), lambda: None
    batch = BatchNoise(stream, op.grid, cfg.dt)
    if len(batch.streams) != np.shape(x0)[0]:
        raise ValueError("need one stream per batch member")
    return lambda k, x: amp * batch.draw(), batch.sync


def step_spde(state, model, op, cfg, stream):
    """Single step of the noisy equation; advances ``stream`` by one increment."""
    drive = None
    if cfg.epsilon > 0:
        drive = math.sqrt(cfg.epsilon) * sample_increment(stream, op.grid, cfg.dt)
    x = advance(np.asarray(state, dtype=float), model, op, cfg.dt, drive, cfg.stiffness_guard)
    _check_blowup(x, cfg.dt, cfg.blowup_threshold)
    return x


def integrate_spde(x0, model, op, cfg, stream=None, observer=None, record=True):
    """Iterate :func:`step_spde` up to ``cfg.t_max``.

    ``stream`` is a :class:`NoiseStream`, or a list of streams when ``x0`` is
    a batch ``(B, r, M)``.  ``observer(t, state)`` is called every
    ``cfg.observer_stride`` steps and stops the run by returning a true value.
    With ``record=False`` only the first and last states are kept.
    """
    drives, finish = _noise_drives(x0, op, cfg, stream)
    try:
        return _run(x0, model, op, cfg, drives, observer, record)
    finally:
        finish()


def integrate_flow(x0, model, op, cfg, observer=None, record=True):
    """Unperturbed flow ``X^0``; identical arithmetic to a zero-noise run."""
    return _run(x0, model, op, cfg, lambda k, x: None, observer, record)


def integrate_skeleton(x0, u, model, op, cfg, observer=None, record=True):
    """Controlled equation driven by the piecewise-constant control ``u``."""
    values = u.values if isinstance(u, ControlPath) else np.asarray(u, dtype=float)
    if len(values) < cfg.n_steps:
        raise ValueError(f"control covers {len(values)} steps, need {cfg.n_steps}")
    return _run(x0, model, op, cfg, lambda k, x: cfg.dt * values[k], observer, record)


def stochastic_convolution(frozen, model, op, cfg, stream, observer=None, record=True):
    """``(I - dt A) Y_{n+1} = Y_n + sqrt(eps) G(frozen_n) dW_n`` from ``Y_0 = 0``.

    ``frozen`` is a :class:`TrajectoryPath` on the step ``cfg.dt`` (a single
    state is held constant).  A list of streams yields a batch.
    """
    states = frozen.states if isinstance(frozen, TrajectoryPath) else np.asarray(frozen)[None]
    batched = not isinstance(stream, NoiseStream)
    shape = ((len(stream),) if batched else ()) + op.grid.shape
    y = np.zeros(shape)
    amp = math.sqrt(cfg.epsilon)
    n = cfg.n_steps
    keep = [y.copy()]
    if cfg.epsilon == 0:
        zero = TrajectoryPath(cfg.dt * cfg.observer_stride, np.zeros((n // cfg.observer_stride + 1,) + shape))
        return zero if record else TrajectoryPath(cfg.t_max, np.zeros((2,) + shape))
    batch = BatchNoise(stream, op.grid, cfg.dt) if batched else None
    for k in range(n):
        frz = states[min(k, len(states) - 1)]
        dw = batch.draw() if batched else sample_increment(stream, op.grid, cfg.dt)
        y = implicit_solve(op, cfg.dt, y + amp * apply_G(model, frz, dw))
        if (k + 1) % cfg.observer_stride == 0:
            if record:
                keep.append(y.copy())
            if observer is not None and observer((k + 1) * cfg.dt, y):
                break
    if batched:
        batch.sync()
    if not record:
        return TrajectoryPath(cfg.t_max, np.array([keep[0], y]))
    return TrajectoryPath(cfg.dt * cfg.observer_stride, np.array(keep))
