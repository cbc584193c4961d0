"""
Equilibria, minimum action paths and quasipotentials.

Equilibria are roots of ``A x + F(x) = 0`` found by damped Newton and
classified by the spectrum of the linearization ``A + DF(x)``.

The minimum action method works at fixed horizon ``T`` on ``N_t`` uniform
steps.  The interior nodes of the path are the unknowns; the discrete
action (see :func:`spde_exit.control.recover_control`) is a smooth function
of them with an adjoint gradient, minimised by L-BFGS-B.  The quasipotential
is the minimum over a schedule of horizons.

Constrained variants penalise the squared distance of each path node to an
allowed region: a half-space standing in for the basin ``D`` united with
sup-norm balls around the endpoints (and around saddles).
"""
from dataclasses import dataclass, field, replace
import warnings

import numba
import numpy as np
from scipy import sparse
from scipy.optimize import minimize
from scipy.sparse.linalg import spsolve

from .errors import AllDiverged, LineSearchFailure, NoConvergence
from .grid import apply_A, apply_A_transpose, from_modes, h_norm, sup_norm, to_modes
from .model import apply_G_inverse, eval_DF, eval_F
from .sim import SimConfig, TrajectoryPath, integrate_flow
from .control import ActionReport, action

UNSTABLE_TOL = 1e-8
DEDUP_TOL = 1e-6
DEFAULT_SCHEDULE = (5.0, 10.0, 20.0, 40.0)


# -- equilibria -----------------------------------------------------------------------

@dataclass
class Equilibrium:
    state: np.ndarray
    residual: float
    unstable_count: int
    leading_eigenvalues: np.ndarray
    label: str
    iterations: int = 0

    @property
    def stable(self):
        return self.unstable_count == 0

    def to_dict(self):
        return {"label": self.label, "residual": float(self.residual),
                "unstable_count": int(self.unstable_count),
                "leading_eigenvalues": [float(v) for v in self.leading_eigenvalues],
                "sup_norm": float(sup_norm(self.state)), "iterations": int(self.iterations)}


class EquilibriumList(list):
    """List of :class:`Equilibrium`; ``failures`` holds ``(seed index, error)`` pairs."""

    def __init__(self, items=(), failures=()):
        super().__init__(items)
        self.failures = list(failures)


def linearization(model, op, x):
    """Sparse ``A + DF(x)`` on the unknowns ordered component-major."""
    r, m = op.grid.shape
    blocks = [[None] * r for _ in range(r)]
    jac = eval_DF(model, x)
    for i in range(r):
        for k in range(r):
            b = sparse.diags(jac[i, k])
            if i == k:
                b = b + sparse.diags([op.sub[i], op.diag[i], op.sup[i]], [-1, 0, 1])
            blocks[i][k] = b
    return sparse.bmat(blocks, format="csc")


def _residual(model, op, x):
    return apply_A(op, x) + eval_F(model, x)


def newton_solve(model, op, seed, tol=1e-12, max_iter=50):
    """Damped Newton for ``A x + F(x) = 0``; returns ``(x, iterations)``."""
    x = np.array(seed, dtype=float)
    shape = x.shape
    res = _residual(model, op, x)
    norm = float(h_norm(res, op.grid))
    for it in range(max_iter + 1):
        if norm < tol:
            return x, it
        if it == max_iter:
            break
        step = spsolve(linearization(model, op, x), -res.ravel()).reshape(shape)
        if not np.all(np.isfinite(step)):
            raise NoConvergence("singular Newton system")
        lam = 1.0
        while True:
            trial = x + lam * step
            try:
                tres = _residual(model, op, trial)
                tnorm = float(h_norm(tres, op.grid))
            except FloatingPointError:
                tnorm = np.inf
            if tnorm < (1 - 1e-4 * lam) * norm or lam < 1e-6:
                break
            lam *= 0.5
        if not np.isfinite(tnorm):
            raise NoConvergence("Newton iterate diverged")
        x, res, norm = trial, tres, tnorm
    raise NoConvergence(f"residual {norm:.3g} after {max_iter} Newton steps")


def spectrum(model, op, x, count=None):
    """Eigenvalues of ``A + DF(x)`` sorted by decreasing real part."""
    jac = linearization(model, op, x).toarray()
    if np.allclose(jac, jac.T, atol=1e-12, rtol=0):
        vals = np.linalg.eigvalsh(jac)
    else:
        vals = np.linalg.eigvals(jac).real
    vals = np.sort(vals)[::-1]
    return vals if count is None else vals[:count]


def unstable_direction(model, op, x):
    """Eigenvector of ``A + DF(x)`` for the eigenvalue of largest real part."""
    jac = linearization(model, op, x).toarray()
    vals, vecs = np.linalg.eig(jac)
    k = int(np.argmax(vals.real))
    v = vecs[:, k].real.reshape(op.grid.shape)
    v /= h_norm(v, op.grid)
    return v * np.sign(v.ravel()[np.argmax(np.abs(v))])


def find_equilibria(model, op, seeds, tol=1e-12, max_iter=50, n_report=5):
    """Newton from every seed, deduplicated and classified.

    Labels are ``zero`` for the trivial state, ``stable{i}`` for attractors
    and ``saddle{i}`` (``index{k}_{i}`` for ``k > 1`` unstable directions).
    """
    found, failures = [], []
    for idx, seed in enumerate(seeds):
        try:
            x, its = newton_solve(model, op, seed, tol, max_iter)
        except NoConvergence as exc:
            failures.append((idx, exc))
            continue
        if any(sup_norm(x - e.state) < DEDUP_TOL for e in found):
            continue
        vals = spectrum(model, op, x)
        unstable = int(np.sum(vals > UNSTABLE_TOL))
        found.append(Equilibrium(x, float(h_norm(_residual(model, op, x), op.grid)), unstable,
                                 vals[:max(n_report, unstable + 1)], "", its))
    counts = {}
    for e in found:
        if sup_norm(e.state) < DEDUP_TOL:
            e.label = "zero"
            continue
        kind = ("stable" if e.unstable_count == 0 else "saddle" if e.unstable_count == 1
                else f"index{e.unstable_count}_")
        counts[kind] = counts.get(kind, 0) + 1
        e.label = f"{kind}{counts[kind]}"
    return EquilibriumList(found, failures)


# -- regions ----------------------------------------------------------------------------

@dataclass(frozen=True)
class HalfSpace:
    """``{x : <x - center, w>_H >= 0}``; sup-norm distance is the deficit over ``|w|_L1``."""

    w: np.ndarray
    center: np.ndarray
    spacing: float

    def value(self, x):
        return self.spacing * np.sum((np.asarray(x) - self.center) * self.w, axis=(-2, -1))

    def distance(self, x):
        scale = self.spacing * np.sum(np.abs(self.w))
        s = self.value(x)
        d = np.maximum(0.0, -s) / scale
        grad = np.where((s < 0)[..., None, None], -self.spacing * self.w / scale, 0.0)
        return d, grad


def _ball_distance(x, center, radius):
    diff = x - center
    norms = np.sqrt(np.sum(diff * diff, axis=-2))
    j = np.argmax(norms, axis=-1)
    top = np.take_along_axis(norms, j[..., None], -1)[..., 0]
    d = np.maximum(0.0, top - radius)
    grad = np.zeros_like(x)
    rows = np.arange(len(x))
    active = d > 0
    sel = diff[rows, :, j] / np.where(top > 0, top, 1.0)[:, None]
    grad[rows[active], :, j[active]] = sel[active]
    return d, grad


@dataclass(frozen=True)
class Region:
    """Allowed set: half-space ``domain`` (everything when ``None``) united with balls."""

    domain: HalfSpace = None
    balls: tuple = ()

    def distance(self, x):
        """Sup-norm distance of each state in the batch ``x`` and its gradient."""
        x = np.asarray(x, dtype=float)
        if self.domain is None:
            return np.zeros(len(x)), np.zeros_like(x)
        best, grad = self.domain.distance(x)
        grad = np.array(np.broadcast_to(grad, x.shape))
        for center, radius in self.balls:
            d, g = _ball_distance(x, center, radius)
            take = d < best
            best = np.where(take, d, best)
            grad[take] = g[take]
        return best, grad


def tilde_region(domain, x, y, rho):
    return Region(domain, ((np.asarray(x), float(rho)), (np.asarray(y), float(rho))))


def hat_region(domain, x, y, saddles, rho):
    extra = tuple((np.asarray(getattr(s, "state", s)), float(rho)) for s in saddles)
    return Region(domain, tilde_region(domain, x, y, rho).balls + extra)


# -- minimum action method ------------------------------------------------------------

@dataclass
class MamProblem:
    x: np.ndarray
    y: np.ndarray
    T: float
    n_t: int = 200
    region: Region = None
    penalty_weight: float = 1e3
    theta: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if self.n_t < 8:
            raise ValueError("need at least 8 path points")
        if not self.T > 0:
            raise ValueError("T must be positive")
        for _, radius in (self.region.balls if self.region is not None else ()):
            if not radius > 0:
                raise ValueError("ball radii must be positive")

    @property
    def dt(self):
        return self.T / self.n_t


def action_and_gradient(phi, model, op, dt, theta=1.0):
    """Discrete action of the full path ``phi`` (endpoints included) and its gradient.

    ``theta`` weights ``A`` between the step's end (``1``, the integrator's
    placement) and its start; ``0.5`` centres it like the reaction term.
    """
    if not model.diffusion.diagonal:
        raise NotImplementedError("adjoint gradient implemented for diagonal diffusion")
    h = op.grid.spacing
    mid = 0.5 * (phi[1:] + phi[:-1])
    a_phi = apply_A(op, phi)
    w = ((phi[1:] - phi[:-1]) / dt - theta * a_phi[1:] - (1 - theta) * a_phi[:-1]
         - eval_F(model, mid))
    pts = np.moveaxis(mid, -2, 0)
    gd = np.moveaxis(model.diffusion.diag_values(pts), 0, -2)
    u = w / gd
    total = 0.5 * dt * h * float(np.sum(u * u))
    p = dt * h * u / gd
    dfp = np.einsum("nikm,nim->nkm", eval_DF(model, mid), p)
    half = -0.5 * dfp
    if not model.diffusion.constant:
        dg = np.moveaxis(model.diffusion.diag_derivative(pts), 0, -2)
        half -= 0.5 * p * dg * u
    grad = np.zeros_like(phi)
    atp = apply_A_transpose(op, p)
    grad[1:] += p / dt - theta * atp + half
    grad[:-1] += -p / dt - (1 - theta) * atp + half
    return total, grad


def initial_path(x, y, n_t, model=None, op=None, smooth_time=0.05):
    """Linear interpolation, then one short flow pass over the interior nodes."""
    s = np.linspace(0.0, 1.0, n_t + 1)[:, None, None]
    phi = (1 - s) * np.asarray(x, dtype=float) + s * np.asarray(y, dtype=float)
    if model is not None and smooth_time > 0:
        dt = min(0.01, smooth_time)
        flowed = integrate_flow(phi[1:-1], model, op, SimConfig(dt, smooth_time), record=False)
        phi[1:-1] = flowed.final
    return phi


@dataclass
class MamResult:
    path: TrajectoryPath
    report: ActionReport
    converged: bool
    value: float
    violation: float
    iterations: int
    grad_norm: float
    message: str = ""

    def __iter__(self):
        return iter((self.path, self.report, self.converged))


@numba.njit(cache=True)
def _back_substitute(diag, off, y, out):
    # solve R a = y, R upper bidiagonal (diag, off), along the leading axis
    n = y.shape[0]
    out[n - 1] = y[n - 1] / diag[n - 1]
    for j in range(n - 2, -1, -1):
        out[j] = (y[j] - off[j] * out[j + 1]) / diag[j]


@numba.njit(cache=True)
def _forward_substitute(diag, off, g, out):
    # solve R^T y = g
    n = g.shape[0]
    out[0] = g[0] / diag[0]
    for j in range(1, n):
        out[j] = (g[j] - off[j - 1] * out[j - 1]) / diag[j]


class PathWhitening:
    """Coordinates in which the linear part of the action has unit Hessian.

    In the eigenbasis of ``A`` each mode of the discrete action is
    ``dt/2 sum_m ((1/dt + theta alpha) a_{m+1} - (1/dt - (1 - theta) alpha) a_m)^2``;
    its Hessian in the
    interior coefficients is a constant tridiagonal matrix ``R^T R`` with
    ``R`` upper bidiagonal.  Optimising over ``y = R a`` removes both the
    spatial stiffness and the time coupling.
    """

    def __init__(self, op, n_t, dt, theta=1.0):
        n = n_t - 1
        beta = 1.0 / dt + theta * op.alpha
        gamma = 1.0 / dt - (1 - theta) * op.alpha
        d0 = dt * (beta**2 + gamma**2)
        e0 = -dt * beta * gamma
        diag = np.empty((n,) + op.alpha.shape)
        off = np.empty((max(n - 1, 1),) + op.alpha.shape)
        diag[0] = np.sqrt(d0)
        for j in range(n - 1):
            off[j] = e0 / diag[j]
            diag[j + 1] = np.sqrt(d0 - off[j] ** 2)
        self.op, self.diag, self.off = op, diag, off

    def to_path(self, y):
        a = np.empty_like(y)
        _back_substitute(self.diag, self.off, y, a)
        return from_modes(self.op, a)

    def from_path(self, phi):
        a = to_modes(self.op, phi)
        y = self.diag * a
        y[:-1] += self.off * a[1:]
        return y

    def gradient(self, g_phi):
        g_a = np.einsum("...cj,cjk->...ck", g_phi, self.op.modes)
        out = np.empty_like(g_a)
        _forward_substitute(self.diag, self.off, g_a, out)
        return out


def _objective(problem, model, op, whitening=None):
    dt = problem.dt
    x, y = np.asarray(problem.x, float), np.asarray(problem.y, float)
    shape = (problem.n_t - 1,) + x.shape
    region = problem.region

    def interior(z):
        z = z.reshape(shape)
        return z if whitening is None else whitening.to_path(z)

    def full(z):
        return np.concatenate([x[None], interior(z), y[None]])

    def fun(z):
        phi = full(z)
        val, grad = action_and_gradient(phi, model, op, dt, problem.theta)
        grad = grad[1:-1]
        if region is not None and region.domain is not None:
            d, dg = region.distance(phi[1:-1])
            val += problem.penalty_weight * float(np.sum(d * d))
            grad = grad + 2 * problem.penalty_weight * d[:, None, None] * dg
        if whitening is not None:
            grad = whitening.gradient(grad)
        return val, grad.ravel()

    return fun, full


def mam_minimize(problem, model, op, init=None, max_iter=5000, gtol=1e-6, raise_on_failure=False):
    """Minimise the (penalised) discrete action over the interior path nodes.

    ``init`` is a :class:`TrajectoryPath` or a state array with the problem's
    endpoints and ``n_t + 1`` states; by default :func:`initial_path`.
    When the eigenbasis of ``A`` is available the search runs in the
    coordinates of :class:`PathWhitening` and the gradient is measured there.
    Converged means the gradient sup-norm fell below ``gtol``, or L-BFGS-B
    stalled with relative objective change below machine precision.
    """
    x, y = np.asarray(problem.x, float), np.asarray(problem.y, float)
    if init is None:
        phi0 = initial_path(x, y, problem.n_t, model, op)
    else:
        phi0 = np.array(init.states if isinstance(init, TrajectoryPath) else init, dtype=float)
        if len(phi0) != problem.n_t + 1:
            raise ValueError(f"init has {len(phi0)} states, need {problem.n_t + 1}")
        if sup_norm(phi0[0] - x) > 1e-12 or sup_norm(phi0[-1] - y) > 1e-12:
            raise ValueError("init endpoints differ from the problem endpoints")
    whitening = PathWhitening(op, problem.n_t, problem.dt, problem.theta) if op.has_eigen else None
    fun, full = _objective(problem, model, op, whitening)
    z0 = (phi0[1:-1] if whitening is None else whitening.from_path(phi0[1:-1])).ravel()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = minimize(fun, z0, jac=True, method="L-BFGS-B",
                       options={"maxiter": max_iter, "maxfun": 2 * max_iter, "gtol": gtol,
                                "ftol": 1e3 * np.finfo(float).eps, "maxcor": 20})
    value, grad = fun(res.x)
    gnorm = float(np.max(np.abs(grad))) if grad.size else 0.0
    msg = str(res.message)
    converged = gnorm < gtol or (res.status == 0 and "REL_REDUCTION" in msg)
    if res.status == 2 and "ABNORMAL" in msg and raise_on_failure:
        raise LineSearchFailure(msg)
    path = TrajectoryPath(problem.dt, full(res.x))
    report = action(path, model, op, problem.theta)
    violation = 0.0
    if problem.region is not None and problem.region.domain is not None:
        violation = float(np.max(problem.region.distance(path.states)[0]))
    return MamResult(path, report, bool(converged), float(value), violation, int(res.nit),
                     gnorm, msg)


def stretch_path(path, n_t):
    """Resample a path onto ``n_t`` steps by linear interpolation in normalised time."""
    states = path.states if isinstance(path, TrajectoryPath) else np.asarray(path)
    old = np.linspace(0, 1, len(states))
    new = np.linspace(0, 1, n_t + 1)
    flat = states.reshape(len(states), -1)
    out = np.empty((n_t + 1, flat.shape[1]))
    for j in range(flat.shape[1]):
        out[:, j] = np.interp(new, old, flat[:, j])
    return out.reshape((n_t + 1,) + states.shape[1:])


# -- quasipotentials ------------------------------------------------------------------

@dataclass
class QuasipotentialResult:
    """Minimum over the horizon schedule; unpacks as ``(value, best_path)``."""

    value: float
    best_path: TrajectoryPath
    records: list = field(default_factory=list)
    violation: float = 0.0

    def __iter__(self):
        return iter((self.value, self.best_path))


def quasipotential(x, y, model, op, schedule=DEFAULT_SCHEDULE, n_t=200, region=None,
                   penalty_weight=1e3, init=None, max_iter=5000, theta=0.5):
    """``min_T`` of the fixed-horizon minimum action, warm-started along the schedule.

    Each horizon starts from the previous optimum stretched to the new ``T``
    (same nodes, longer steps).  ``records`` lists ``T``, value, action,
    convergence and violation per horizon.  Raises :class:`AllDiverged` if no
    horizon converges.
    """
    x, y = np.asarray(x, float), np.asarray(y, float)
    records, best = [], None
    warm = None if init is None else stretch_path(init, n_t)
    for T in schedule:
        prob = MamProblem(x, y, float(T), n_t, region, penalty_weight, theta)
        res = mam_minimize(prob, model, op, warm, max_iter=max_iter)
        records.append({"T": float(T), "n_t": int(n_t), "value": res.value,
                        "action": res.report.total_action, "converged": res.converged,
                        "violation": res.violation, "iterations": res.iterations})
        warm = res.path.states
        if res.converged and (best is None or res.value < best.value):
            best = res
    if best is None:
        raise AllDiverged(f"no horizon in {tuple(schedule)} converged")
    return QuasipotentialResult(best.value, best.path, records, best.violation)


def constrained_quasipotential(problem, model, op, init=None, max_iter=5000):
    """Penalised minimum action for a problem carrying a :class:`Region`.

    The value is the penalised objective (action plus penalty); the residual
    violation is returned alongside.  Unpacks as ``(value, best_path, violation)``.
    """
    if problem.region is None:
        raise ValueError("problem has no region constraint")
    res = mam_minimize(problem, model, op, init, max_iter=max_iter)
    return ConstrainedResult(res.value, res.path, res.violation, res.report.total_action,
                             res.converged)


@dataclass
class ConstrainedResult:
    value: float
    best_path: TrajectoryPath
    violation: float
    action: float
    converged: bool

    def __iter__(self):
        return iter((self.value, self.best_path, self.violation))


def rho_sweep(x, y, domain, rhos, model, op, T=20.0, n_t=200, saddles=(), init=None,
              penalty_weight=1e3, max_iter=5000, theta=0.5):
    """Constrained values over a decreasing ``rho`` sequence, with continuation.

    With ``saddles`` the balls around them are allowed too (the hat variant).
    Shrinking ``rho`` shrinks the allowed set, so every path computed at a
    smaller ``rho`` is also a candidate at a larger one; each value is the
    best penalised objective over those candidates, which makes the reported
    sequence nondecreasing as ``rho`` decreases.
    """
    rhos = sorted((float(r) for r in rhos), reverse=True)
    make = ((lambda r: hat_region(domain, x, y, saddles, r)) if len(saddles)
            else (lambda r: tilde_region(domain, x, y, r)))
    results, warm = [], init
    for rho in rhos:
        prob = MamProblem(x, y, T, n_t, make(rho), penalty_weight, theta)
        res = constrained_quasipotential(prob, model, op, warm, max_iter)
        results.append(res)
        warm = res.best_path
    for i, rho in enumerate(rhos):
        prob = MamProblem(x, y, T, n_t, make(rho), penalty_weight, theta)
        fun, _ = _objective(prob, model, op)
        for later in results[i + 1:]:
            cand = fun(later.best_path.states[1:-1].ravel())[0]
            if cand < results[i].value:
                results[i] = replace(later, value=float(cand),
                                     violation=float(np.max(make(rho).distance(later.best_path.states)[0])))
    return list(zip(rhos, results))


@dataclass
class BoundaryQuasipotential:
    values: dict
    paths: dict
    minimum: float
    argmin: str
    rejected: list

    def to_dict(self):
        return {"values": {k: float(v) for k, v in sorted(self.values.items())},
                "minimum": float(self.minimum), "argmin": self.argmin,
                "rejected": list(self.rejected)}


def boundary_quasipotential(x_star, saddles, model, op, schedule=DEFAULT_SCHEDULE, n_t=200,
                            max_iter=5000):
    """``V(x*, K_i)`` for every unstable equilibrium in ``saddles``; stable ones are rejected."""
    keep = [s for s in saddles if s.unstable_count > 0]
    rejected = [s.label for s in saddles if s.unstable_count == 0]
    if not keep:
        raise ValueError("no unstable equilibria among the given saddles")
    values, paths = {}, {}
    start = getattr(x_star, "state", x_star)
    for s in keep:
        res = quasipotential(start, s.state, model, op, schedule, n_t, max_iter=max_iter)
        values[s.label] = res.value
        paths[s.label] = res.best_path
    label = min(values, key=values.get)
    return BoundaryQuasipotential(values, paths, values[label], label, rejected)
