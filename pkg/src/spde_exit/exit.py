"""
Basin membership, exit-time Monte Carlo and exit-shape statistics.

Membership of a state in the basin ``D`` of an attractor ``x*`` is decided
by running the unperturbed flow from it: entering the ball ``B(x*, rho_in)``
means inside; entering a ball around another attractor, or blowing up,
means outside; neither within ``t_flow`` is undecided.  Every statistic
below is therefore conditional on these flow verdicts.

The Monte Carlo driver advances a batch of trajectories in lockstep.  A
linear functional ``l`` with ``l(x*) = 1`` and ``l = 0`` on the saddle(s)
serves as a cheap filter: the flow check runs when ``l`` drops below
``band`` and then every ``checkpoint_stride`` steps while it stays there.
The exit time is the first step whose check says outside (undecided
verdicts are retried with a four times longer flow, and count as exits
if they remain undecided).
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
import math
import time

import numpy as np

from .errors import InsufficientData, NonFiniteOutput
from .grid import h_inner, implicit_solve, sup_norm
from .model import apply_G, eval_F
from .noise import BatchNoise, NoiseStream, split_stream
from .quasipotential import HalfSpace, unstable_direction
from .sim import advance

INSIDE, UNDECIDED, OUTSIDE = 1, 0, -1
VERDICTS = {INSIDE: "inside", UNDECIDED: "undecided", OUTSIDE: "outside"}


@dataclass
class BasinOracle:
    """Flow-based membership test for the basin of ``attractor``.

    ``others`` are states of other attractors; their ``rho_in`` balls count
    as outside.  ``surrogate`` is the filter functional used by
    :func:`run_exit_mc`.
    """

    attractor: np.ndarray
    rho_in: float = 0.2
    t_flow: float = 40.0
    dt_flow: float = 0.02
    others: tuple = ()
    surrogate: HalfSpace = None
    band: float = 0.15
    blowup_threshold: float = 1e3
    check_every: int = 5

    def __post_init__(self):
        if not (self.rho_in > 0 and self.t_flow > 0 and self.dt_flow > 0):
            raise ValueError("rho_in, t_flow and dt_flow must be positive")
        self.attractor = np.asarray(getattr(self.attractor, "state", self.attractor), dtype=float)
        self.others = tuple(np.asarray(getattr(o, "state", o), dtype=float) for o in self.others)


def default_surrogate(attractor, saddles, model, op):
    """Linear filter ``l(x) = <x - c, w>_H`` scaled so that ``l(x*) = 1``.

    One saddle: ``w`` is its unstable eigenvector and ``c`` the saddle.
    Several: ``w = x* - c`` with ``c`` the mean of the saddles.
    """
    xs = np.asarray(getattr(attractor, "state", attractor), dtype=float)
    states = [np.asarray(getattr(s, "state", s), dtype=float) for s in saddles]
    if not states:
        raise ValueError("need at least one saddle")
    if len(states) == 1:
        center = states[0]
        w = unstable_direction(model, op, center)
    else:
        center = np.mean(states, axis=0)
        w = xs - center
    level = float(h_inner(xs - center, w, op.grid))
    if level == 0.0:
        raise ValueError("attractor lies on the surrogate hyperplane")
    return HalfSpace(w / level, center, op.grid.spacing)


def build_oracle(attractor, equilibria, model, op, **kwargs):
    """Oracle for ``attractor`` using the other stable states and the saddles in ``equilibria``."""
    xs = np.asarray(getattr(attractor, "state", attractor), dtype=float)
    others = [e.state for e in equilibria if e.unstable_count == 0 and sup_norm(e.state - xs) > 1e-6]
    saddles = [e for e in equilibria if e.unstable_count == 1]
    surrogate = kwargs.pop("surrogate", None)
    if surrogate is None and saddles:
        surrogate = default_surrogate(xs, saddles, model, op)
    return BasinOracle(xs, others=tuple(others), surrogate=surrogate, **kwargs)


def classify(states, oracle, model, op, t_flow=None):
    """Verdict codes (``1`` inside, ``-1`` outside, ``0`` undecided) for a batch of states."""
    x = np.array(states, dtype=float)
    single = x.ndim == 2
    if single:
        x = x[None]
    verdict = np.zeros(len(x), dtype=int)
    active = np.arange(len(x))
    steps = int(math.ceil((oracle.t_flow if t_flow is None else t_flow) / oracle.dt_flow))
    every = max(1, int(oracle.check_every))
    for k in range(steps + 1):
        xa = x[active]
        if k % every and k != steps:
            try:
                x[active] = advance(xa, model, op, oracle.dt_flow)
            except NonFiniteOutput:
                x[active] = _advance_rows(xa, model, op, oracle.dt_flow)
            continue
        norm = sup_norm(xa)
        out = ~np.isfinite(norm) | (norm > oracle.blowup_threshold)
        for o in oracle.others:
            out |= sup_norm(xa - o) < oracle.rho_in
        inside = ~out & (sup_norm(xa - oracle.attractor) < oracle.rho_in)
        verdict[active[inside]] = INSIDE
        verdict[active[out]] = OUTSIDE
        keep = ~(inside | out)
        active, xa = active[keep], xa[keep]
        if not len(active) or k == steps:
            break
        try:
            x[active] = advance(xa, model, op, oracle.dt_flow)
        except NonFiniteOutput:
            x[active] = _advance_rows(xa, model, op, oracle.dt_flow)
    return verdict[0] if single else verdict


def _advance_rows(xs, model, op, dt):
    out = np.empty_like(xs)
    for i, x in enumerate(xs):
        try:
            out[i] = advance(x, model, op, dt)
        except NonFiniteOutput:
            out[i] = np.inf
    return out


def basin_membership(x, oracle, model, op):
    """``'inside'``, ``'outside'`` or ``'undecided'``."""
    return VERDICTS[int(classify(x, oracle, model, op))]


@dataclass
class Certificate:
    passed: bool
    n_points: int
    failures: int


def certify(oracle, model, op, n_points=32, seed=0):
    """Check that flows from points on the sup-sphere of radius ``rho_in`` shrink back.

    Half of the directions are smooth (a few random sine modes), half are
    independent node values; each is scaled to sup-distance ``rho_in``.
    A point passes if its flow enters ``B(x*, rho_in / 2)`` within ``t_flow``.
    """
    rng = np.random.default_rng(seed)
    shape = op.grid.shape
    xi = op.grid.nodes / op.grid.length
    dirs = []
    for i in range(n_points):
        if i % 2 == 0:
            coef = rng.standard_normal((shape[0], 5)) / np.arange(1, 6)
            d = sum(coef[:, k - 1:k] * np.sin(k * np.pi * xi) for k in range(1, 6))
        else:
            d = rng.uniform(-1, 1, shape)
        dirs.append(d * oracle.rho_in / sup_norm(d))
    pts = oracle.attractor + np.array(dirs)
    half = BasinOracle(oracle.attractor, 0.5 * oracle.rho_in, oracle.t_flow, oracle.dt_flow,
                       (), None, oracle.band, oracle.blowup_threshold, oracle.check_every)
    fails = int(np.sum(classify(pts, half, model, op) != INSIDE))
    return Certificate(fails == 0, n_points, fails)


# -- exit-time Monte Carlo ------------------------------------------------------------

@dataclass
class ExitRecord:
    """One exit sample; ``tau`` is the censoring time when ``censored``."""

    epsilon: float
    seed: int
    trajectory: int
    tau: float
    exit_shape: np.ndarray
    nearest_saddle: str = ""
    saddle_distance: float = float("nan")
    blowup: bool = False
    censored: bool = False
    verdict: str = "outside"
    checkpoint_step: int = 0
    checkpoint_state: np.ndarray = field(default=None, repr=False)

    def row(self):
        return {"epsilon": self.epsilon, "seed": self.seed, "trajectory": self.trajectory,
                "tau": self.tau, "nearest_saddle": self.nearest_saddle,
                "saddle_distance": self.saddle_distance, "blowup": int(self.blowup),
                "censored": int(self.censored), "verdict": self.verdict,
                "checkpoint_step": self.checkpoint_step}


def eps_key(eps):
    """Integer key of a noise level, used to derive its stream."""
    return int(round(float(eps) * 1e9))


def trajectory_stream(root, eps, index):
    return split_stream(split_stream(root, eps_key(eps)), index)


def nearest_saddle(state, saddles):
    """Label and sup-distance of the saddle closest to ``state``."""
    best, dist = "", float("inf")
    for s in saddles:
        d = float(sup_norm(state - s.state))
        if d < dist:
            best, dist = s.label, d
    return best, dist


@dataclass
class _Job:
    x0: np.ndarray
    eps: float
    indices: tuple
    oracle: BasinOracle
    model: object
    op: object
    dt: float
    max_steps: int
    root: NoiseStream
    stride: int
    saddles: tuple
    start_steps: int = 0
    last_check: np.ndarray = None
    max_wall: float = None


def _step(x, model, op, dt, drive):
    rhs = x + dt * eval_F(model, x) + apply_G(model, x, drive)
    return implicit_solve(op, dt, rhs)


def _exit_loop(job):
    """Advance one batch until every trajectory exits or the step cap is hit."""
    oracle, model, op = job.oracle, job.model, job.op
    n = len(job.indices)
    x = np.array(np.broadcast_to(job.x0, (n,) + op.grid.shape), dtype=float)
    streams = [trajectory_stream(job.root, job.eps, i) for i in job.indices]
    for s in streams:
        s.step_counter = job.start_steps
    noise = BatchNoise(streams, op.grid, job.dt)
    amp = math.sqrt(job.eps)
    surrogate = oracle.surrogate
    active = np.ones(n, dtype=bool)
    last_check = (np.full(n, job.start_steps) if job.last_check is None
                  else np.array(job.last_check, dtype=int))
    ck_state = x.copy()
    ell_prev = surrogate.value(x) if surrogate is not None else np.zeros(n)
    records = [None] * n
    t0 = time.monotonic()
    step = job.start_steps

    def finish(i, tau, shape, **kw):
        label, dist = nearest_saddle(shape, job.saddles) if job.saddles else ("", float("nan"))
        records[i] = ExitRecord(job.eps, int(job.root.root_seed), int(job.indices[i]), tau,
                                shape.copy(), label, dist, checkpoint_step=int(last_check[i]),
                                checkpoint_state=ck_state[i].copy(), **kw)

    while active.any() and step < job.max_steps:
        if job.max_wall is not None and time.monotonic() - t0 > job.max_wall:
            break
        idx = np.flatnonzero(active)
        dw = noise.draw(active)
        xa = _step(x[idx], model, op, job.dt, amp * dw)
        step += 1
        x[idx] = xa
        norm = sup_norm(xa)
        blown = ~np.isfinite(norm) | (norm > oracle.blowup_threshold)
        for i in idx[blown]:
            finish(i, step * job.dt, x[i], blowup=True)
            active[i] = False
        keep = ~blown
        idx, xa = idx[keep], xa[keep]
        if surrogate is None:
            want = (step - last_check[idx]) >= job.stride
        else:
            ell = surrogate.value(xa)
            want = (ell < oracle.band) & ((ell_prev[idx] >= oracle.band)
                                         | (step - last_check[idx] >= job.stride))
            ell_prev[idx] = ell
        if not want.any():
            continue
        check = idx[want]
        verdict = classify(x[check], oracle, model, op)
        unsure = verdict == UNDECIDED
        if unsure.any():
            verdict[unsure] = classify(x[check[unsure]], oracle, model, op, 4 * oracle.t_flow)
        for i, v in zip(check, verdict):
            if v == INSIDE:
                last_check[i] = step
                ck_state[i] = x[i]
            else:
                finish(i, step * job.dt, x[i], verdict=VERDICTS[int(v)])
                active[i] = False
    for i in np.flatnonzero(active):
        finish(i, step * job.dt, x[i], censored=True, verdict="censored")
    return records


def run_exit_mc(x0, eps_list, n_samples, oracle, model, op, cfg, root_stream, saddles=(),
                checkpoint_stride=50, chunk_size=50, workers=1, max_wall=None):
    """Exit records for every ``eps`` in ``eps_list``, ``n_samples`` each.

    ``cfg.dt`` is the time step and ``cfg.t_max`` the per-trajectory cap
    (censoring time).  Trajectory ``i`` at noise level ``eps`` draws its noise
    from ``split(split(root, key(eps)), i)``, so results do not depend on
    chunking, worker count or the order of ``eps_list``.  ``max_wall``
    (seconds per chunk) censors early and breaks that guarantee; it is off by
    default.  Records are sorted by ``(eps, trajectory)`` in input order.
    """
    x0 = np.asarray(getattr(x0, "state", x0), dtype=float)
    if oracle.surrogate is not None and classify(x0, oracle, model, op) != INSIDE:
        raise ValueError("x0 is not inside the basin according to the oracle")
    saddles = tuple(saddles)
    jobs = []
    for eps in eps_list:
        if not eps > 0:
            raise ValueError("noise levels must be positive")
        for start in range(0, n_samples, chunk_size):
            jobs.append(_Job(x0, float(eps), tuple(range(start, min(n_samples, start + chunk_size))),
                             oracle, model, op, cfg.dt, cfg.n_steps,
                             NoiseStream(root_stream.root_seed, tuple(root_stream.spawn_key)),
                             int(checkpoint_stride), saddles, max_wall=max_wall))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_exit_loop, jobs))
    else:
        results = [_exit_loop(j) for j in jobs]
    out = [r for batch in results for r in batch]
    order = {float(e): k for k, e in enumerate(eps_list)}
    out.sort(key=lambda r: (order[r.epsilon], r.trajectory))
    return out


def replay_exit(record, x0, oracle, model, op, cfg, root_stream, checkpoint_stride=50):
    """Re-run one trajectory from its last inside checkpoint; returns the new record."""
    job = _Job(record.checkpoint_state, record.epsilon, (record.trajectory,), oracle, model, op,
               cfg.dt, cfg.n_steps, root_stream, int(checkpoint_stride), (),
               start_steps=int(record.checkpoint_step),
               last_check=np.array([record.checkpoint_step]))
    return _exit_loop(job)[0]


# -- reports --------------------------------------------------------------------------

@dataclass
class ScalingReport:
    """``rows`` has one dict per noise level; ``level`` estimates ``lim eps log E tau``."""

    rows: list
    level: float
    slope: float
    ci: tuple
    censoring: bool
    heavy_censoring: bool
    notes: list

    def to_dict(self):
        return {"rows": self.rows, "level": self.level, "slope": self.slope,
                "ci": list(self.ci), "censoring": self.censoring,
                "heavy_censoring": self.heavy_censoring, "notes": list(self.notes)}


def _fit_level(eps, means):
    y = eps * np.log(means)
    design = np.column_stack([np.ones_like(eps), eps])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    return float(coef[0]), float(coef[1])


HEAVY_CENSORING = 0.1


def exit_scaling_report(records, n_boot=2000, seed=0, confidence=0.95):
    """Regress ``eps log(mean tau)`` on ``eps``; the intercept is the level estimate.

    Censored samples enter with their censoring time, which biases means
    low; when any level is censored the report says so, and the bootstrap
    interval is widened by ``1 / (1 - c)`` with ``c`` the largest censor rate.
    """
    by_eps = {}
    for r in records:
        by_eps.setdefault(float(r.epsilon), []).append(r)
    levels = sorted(by_eps)
    usable = [e for e in levels
              if sum(not r.censored for r in by_eps[e]) > len(by_eps[e]) / 2]
    if len(usable) < 3:
        raise InsufficientData(f"need 3 noise levels with mostly uncensored samples, got {len(usable)}")
    rows = []
    taus = {}
    for e in levels:
        tau = np.array([r.tau for r in by_eps[e]], dtype=float)
        cens = np.array([r.censored for r in by_eps[e]])
        taus[e] = tau
        rows.append({"epsilon": e, "n": int(len(tau)), "mean_tau": float(tau.mean()),
                     "median_tau": float(np.median(tau)),
                     "eps_log_mean_tau": float(e * np.log(tau.mean())),
                     "eps_log_median_tau": float(e * np.log(np.median(tau))),
                     "censor_rate": float(cens.mean()),
                     "blowup_rate": float(np.mean([r.blowup for r in by_eps[e]]))})
    eps = np.array(usable)
    level, slope = _fit_level(eps, np.array([taus[e].mean() for e in usable]))
    rng = np.random.default_rng(seed)
    boots = np.empty(n_boot)
    for b in range(n_boot):
        means = [rng.choice(taus[e], size=len(taus[e]), replace=True).mean() for e in usable]
        boots[b] = _fit_level(eps, np.array(means))[0]
    alpha = 0.5 * (1 - confidence)
    lo, hi = np.quantile(boots, [alpha, 1 - alpha])
    cmax = max(r["censor_rate"] for r in rows)
    notes = ["exit times are conditional on the flow-based membership verdicts"]
    if cmax > 0:
        widen = 1.0 / (1.0 - min(cmax, 0.99))
        lo, hi = level - (level - lo) * widen, level + (hi - level) * widen
        notes.append(f"censored samples present (max rate {cmax:.3f}); interval widened by {widen:.3f}")
    dropped = [e for e in levels if e not in usable]
    if dropped:
        notes.append(f"levels with censored majority excluded from the fit: {dropped}")
    return ScalingReport(rows, level, slope, (float(lo), float(hi)), cmax > 0,
                         cmax > HEAVY_CENSORING, notes)


@dataclass
class ShapeReport:
    """Per noise level: mass per nearest saddle and the fraction within ``delta``."""

    delta: float
    levels: list

    def to_dict(self):
        return {"delta": self.delta, "levels": self.levels}

    def fraction_within(self, eps):
        return next(l["fraction_within"] for l in self.levels if l["epsilon"] == eps)


def exit_shape_histogram(records, saddles, delta=0.5, minimizers=None, bins=20):
    """Nearest-saddle distribution of exit shapes (censored samples excluded).

    ``minimizers`` lists the labels of the saddles achieving the boundary
    quasipotential (all saddles by default); ``fraction_within`` is the share
    of exit shapes within sup-distance ``delta`` of one of them.
    """
    labels = [s.label for s in saddles]
    keep = set(labels if minimizers is None else minimizers)
    by_eps = {}
    for r in records:
        if not r.censored:
            by_eps.setdefault(float(r.epsilon), []).append(r)
    out = []
    for e in sorted(by_eps, reverse=True):
        dists = np.array([[sup_norm(r.exit_shape - s.state) for s in saddles] for r in by_eps[e]])
        n = len(dists)
        nearest = np.argmin(dists, axis=1)
        mass = {lab: float(np.mean(nearest == k)) for k, lab in enumerate(labels)}
        stderr = {lab: float(math.sqrt(p * (1 - p) / n)) for lab, p in mass.items()}
        sel = [k for k, lab in enumerate(labels) if lab in keep]
        closest = dists[:, sel].min(axis=1)
        hist, edges = np.histogram(closest, bins=bins, range=(0.0, max(2 * delta, float(closest.max()))))
        out.append({"epsilon": e, "n": n, "mass": mass, "stderr": stderr,
                    "fraction_within": float(np.mean(closest <= delta)),
                    "median_distance": float(np.median(closest)),
                    "histogram": {"edges": [float(v) for v in edges],
                                  "counts": [int(c) for c in hist]}})
    return ShapeReport(float(delta), out)
