"""
Reaction and diffusion coefficients, their pointwise (Nemytskii) lifts to
fields, and a sampling validator for the dissipativity and ellipticity
hypotheses.

Everything stored on a :class:`ModelSpec` is a small picklable object so a
model can be shipped to worker processes and rebuilt from a config file.
Pointwise maps act on arrays whose *first* axis indexes the ``r`` components;
the field-level helpers move the component axis of ``(..., r, M)`` arrays
into place.
"""
from dataclasses import dataclass, field
import math

import numpy as np

from .errors import NonFiniteOutput, SingularDiffusion


# -- spatial coefficients -------------------------------------------------------

@dataclass(frozen=True)
class Constant:
    value: float

    def __call__(self, xi):
        return np.full(np.shape(xi), float(self.value))


@dataclass(frozen=True)
class SineModulated:
    """``base * (1 + amplitude * sin(pi xi / length))``."""

    base: float
    amplitude: float
    length: float

    def __call__(self, xi):
        return self.base * (1.0 + self.amplitude * np.sin(np.pi * np.asarray(xi) / self.length))


# -- reactions ------------------------------------------------------------------

@dataclass(frozen=True)
class PolynomialReaction:
    """``f_i(u) = sum c * prod_k u_k^{e_k}`` over the terms of component ``i``.

    ``terms`` is a tuple of ``(component, coefficient, exponents)`` with one
    nonnegative integer exponent per component.
    """

    r: int
    terms: tuple

    def __post_init__(self):
        clean = []
        for comp, coef, exps in self.terms:
            exps = tuple(int(e) for e in exps)
            if len(exps) != self.r or min(exps) < 0 or not 0 <= int(comp) < self.r:
                raise ValueError(f"bad polynomial term {(comp, coef, exps)}")
            clean.append((int(comp), float(coef), exps))
        object.__setattr__(self, "terms", tuple(clean))

    @property
    def degree(self):
        return max(sum(e) for _, _, e in self.terms)

    def _powers(self, u):
        top = self.degree
        table = []
        for k in range(self.r):
            row = [None, u[k]]
            for _ in range(2, top + 1):
                row.append(row[-1] * u[k])
            table.append(row)
        return table

    @staticmethod
    def _monomial(table, coef, exps, shape):
        term = None
        for k, e in enumerate(exps):
            if e:
                term = table[k][e] if term is None else term * table[k][e]
        if term is None:
            return np.full(shape, coef)
        return coef * term

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        table = self._powers(u)
        out = np.zeros_like(u)
        for comp, coef, exps in self.terms:
            out[comp] += self._monomial(table, coef, exps, u.shape[1:])
        return out

    def jacobian(self, u):
        """``J[i, k] = d f_i / d u_k`` with shape ``(r, r, ...)``."""
        u = np.asarray(u, dtype=float)
        table = self._powers(u)
        out = np.zeros((self.r,) + u.shape)
        for comp, coef, exps in self.terms:
            for k, ek in enumerate(exps):
                if ek:
                    lowered = exps[:k] + (ek - 1,) + exps[k + 1:]
                    out[comp, k] += self._monomial(table, coef * ek, lowered, u.shape[1:])
        return out

    def lipschitz_bound(self, radius):
        """Upper bound on ``|Df(u)|`` over ``|u| <= radius``."""
        radius = max(float(radius), 1.0)
        total = 0.0
        for _, coef, exps in self.terms:
            deg = sum(exps)
            if deg:
                total += abs(coef) * deg * radius ** (deg - 1)
        return total


# -- diffusion matrices -----------------------------------------------------------

@dataclass(frozen=True)
class DiagonalDiffusion:
    """``g(u) = diag(scale * (1 + beta * tanh(u_i)))``; ``beta = 0`` is additive noise."""

    r: int
    scale: float = 1.0
    beta: float = 0.0

    diagonal = True

    @property
    def constant(self):
        return self.beta == 0.0

    def diag_values(self, u):
        u = np.asarray(u, dtype=float)
        if self.beta == 0.0:
            return np.full(u.shape, self.scale)
        return self.scale * (1.0 + self.beta * np.tanh(u))

    def diag_derivative(self, u):
        u = np.asarray(u, dtype=float)
        if self.beta == 0.0:
            return np.zeros(u.shape)
        return self.scale * self.beta / np.cosh(u) ** 2

    def __call__(self, u):
        d = self.diag_values(u)
        out = np.zeros((self.r,) + d.shape)
        for i in range(self.r):
            out[i, i] = d[i]
        return out


# -- the model --------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    """Coefficients of ``du = [A u + f(u)] dt + sqrt(eps) g(u) dw`` on ``[0, length]``.

    ``lam``, ``rho``, ``C`` are the dissipativity constants of
    ``(f(x+h)-f(x)).h/|h| <= -lam |h|^(1+rho) + C (1 + |x|^(1+rho))``;
    ``kappa0 <= |g(x) h| / |h| <= kappa1`` and ``kappa`` is the Lipschitz
    constant of ``g``.
    """

    name: str
    r: int
    length: float
    a_coeffs: tuple
    b_coeffs: tuple
    reaction: PolynomialReaction
    diffusion: DiagonalDiffusion
    lam: float
    rho: float
    C: float
    kappa0: float
    kappa1: float
    kappa: float
    params: tuple = field(default=())

    def __post_init__(self):
        if not (0 < self.kappa0 < self.kappa1):
            raise ValueError("need 0 < kappa0 < kappa1")
        if not (self.lam > 0 and self.rho > 0 and self.C > 0):
            raise ValueError("lam, rho and C must be positive")
        if self.kappa < 0:
            raise ValueError("kappa must be nonnegative")
        if len(self.a_coeffs) != self.r or len(self.b_coeffs) != self.r:
            raise ValueError("one a and one b coefficient per component")

    @property
    def reaction_f(self):
        return self.reaction

    @property
    def reaction_jacobian(self):
        return self.reaction.jacobian

    @property
    def diffusion_g(self):
        return self.diffusion

    @property
    def additive(self):
        return self.diffusion.constant


def _diffusion_bounds(scale, beta):
    lo, hi = scale * (1 - abs(beta)), scale * (1 + abs(beta))
    if not lo < hi:
        # constant g, or beta below rounding: any bracket of the scale will do
        return 0.5 * scale, 2.0 * scale
    return lo, hi


def allen_cahn(length=5.0, diffusivity=1.0, modulation=0.0, drift=0.0, noise_scale=1.0,
               noise_beta=0.0):
    """Scalar ``f(u) = u - u^3``; ``noise_beta`` switches on ``g(u) = 1 + beta tanh(u)``."""
    a = (SineModulated(diffusivity, modulation, length) if modulation
         else Constant(diffusivity))
    kappa0, kappa1 = _diffusion_bounds(noise_scale, noise_beta)
    name = "allen_cahn" if noise_beta == 0.0 else "allen_cahn_multiplicative"
    return ModelSpec(
        name=name, r=1, length=float(length), a_coeffs=(a,), b_coeffs=(Constant(drift),),
        reaction=PolynomialReaction(1, ((0, 1.0, (1,)), (0, -1.0, (3,)))),
        diffusion=DiagonalDiffusion(1, noise_scale, noise_beta),
        lam=0.5, rho=2.0, C=10.0, kappa0=kappa0, kappa1=kappa1,
        kappa=noise_scale * abs(noise_beta),
        params=(("length", length), ("diffusivity", diffusivity), ("modulation", modulation),
                ("drift", drift), ("noise_scale", noise_scale), ("noise_beta", noise_beta)),
    )


def coupled_cubic(length=5.0, diffusivity=(1.0, 0.5), coupling=0.5):
    """Two-component system ``f_i = -u_i^3 + p_i(u)`` with quadratic ``p_i``."""
    c = float(coupling)
    terms = ((0, 1.0, (1, 0)), (0, -1.0, (3, 0)), (0, -c, (1, 1)),
             (1, -1.0, (0, 1)), (1, -1.0, (0, 3)), (1, c, (2, 0)))
    return ModelSpec(
        name="coupled_cubic", r=2, length=float(length),
        a_coeffs=tuple(Constant(d) for d in diffusivity), b_coeffs=(Constant(0.0), Constant(0.0)),
        reaction=PolynomialReaction(2, terms), diffusion=DiagonalDiffusion(2),
        lam=0.25, rho=2.0, C=20.0, kappa0=0.5, kappa1=2.0, kappa=0.0,
        params=(("length", length), ("diffusivity", tuple(diffusivity)), ("coupling", coupling)),
    )


def polynomial_model(r, terms, length=5.0, diffusivity=1.0, lam=0.5, rho=2.0, C=10.0,
                     noise_scale=1.0, noise_beta=0.0):
    """User polynomial reaction from a coefficient table."""
    reaction = PolynomialReaction(int(r), tuple(terms))
    diffs = diffusivity if np.ndim(diffusivity) else (diffusivity,) * int(r)
    kappa0, kappa1 = _diffusion_bounds(noise_scale, noise_beta)
    return ModelSpec(
        name="polynomial", r=int(r), length=float(length),
        a_coeffs=tuple(Constant(d) for d in diffs), b_coeffs=tuple(Constant(0.0) for _ in diffs),
        reaction=reaction, diffusion=DiagonalDiffusion(int(r), noise_scale, noise_beta),
        lam=lam, rho=rho, C=C, kappa0=kappa0, kappa1=kappa1,
        kappa=noise_scale * abs(noise_beta),
        params=(("terms", reaction.terms), ("length", length)),
    )


BUILTIN_MODELS = {
    "allen_cahn": allen_cahn,
    "allen_cahn_multiplicative": lambda **kw: allen_cahn(**{"noise_beta": 0.25, **kw}),
    "coupled_cubic": coupled_cubic,
    "polynomial": polynomial_model,
}


# -- Nemytskii lifts ----------------------------------------------------------------

def _pointwise(x):
    x = np.asarray(x, dtype=float)
    nd = x.ndim
    return x.transpose((nd - 2,) + tuple(range(nd - 2)) + (nd - 1,))


def _fieldwise(u):
    nd = u.ndim
    return u.transpose(tuple(range(1, nd - 1)) + (0, nd - 1))


def eval_F(model, x):
    """``F(x)(xi_j) = f(x(xi_j))`` on every node."""
    with np.errstate(over="ignore", invalid="ignore"):
        out = _fieldwise(model.reaction(_pointwise(x)))
        # a finite sum rules out inf/nan entries without a second full pass
        if not np.isfinite(np.sum(out)) and not np.all(np.isfinite(out)):
            raise NonFiniteOutput("reaction term overflowed")
    return out


def eval_DF(model, x):
    """Pointwise Jacobian with shape ``(..., r, r, M)``."""
    jac = model.reaction.jacobian(_pointwise(x))
    return np.moveaxis(np.moveaxis(jac, 0, -2), 0, -2)


def apply_G(model, x, h):
    """``[G(x) h](xi) = g(x(xi)) h(xi)``."""
    h = np.asarray(h, dtype=float)
    g = model.diffusion
    if g.diagonal:
        if g.constant:
            return g.scale * h
        return _fieldwise(g.diag_values(_pointwise(x))) * h
    mat = np.moveaxis(g(_pointwise(x)), (0, 1), (-2, -1))
    return np.moveaxis(np.einsum("...ij,...j->...i", mat, np.moveaxis(h, -2, -1)), -1, -2)


def apply_G_inverse(model, x, h):
    h = np.asarray(h, dtype=float)
    g = model.diffusion
    if g.diagonal:
        d = _fieldwise(g.diag_values(_pointwise(x)))
        if np.any(d == 0):
            raise SingularDiffusion("g(x) singular at some node")
        return h / d
    mat = np.moveaxis(g(_pointwise(x)), (0, 1), (-2, -1))
    try:
        sol = np.linalg.solve(mat, np.moveaxis(h, -2, -1)[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise SingularDiffusion(str(exc)) from exc
    return np.moveaxis(sol, -1, -2)


# -- assumption validation ----------------------------------------------------------

@dataclass(frozen=True)
class CheckResult:
    name: str
    margin: float
    passed: bool
    worst_point: tuple


@dataclass(frozen=True)
class ValidationReport:
    model: str
    sample_radius: float
    n_samples: int
    checks: tuple

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def __getitem__(self, name):
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self):
        return {
            "model": self.model, "sample_radius": self.sample_radius,
            "n_samples": self.n_samples, "passed": self.passed,
            "checks": {c.name: {"margin": c.margin, "passed": c.passed,
                                "worst_point": [list(map(float, p)) for p in c.worst_point]}
                       for c in self.checks},
        }


def _ball_samples(rng, n, r, radius):
    direc = rng.standard_normal((r, n))
    direc /= np.linalg.norm(direc, axis=0)
    rad = radius * rng.uniform(0.0, 1.0, n)
    rad[: n // 4] = radius
    return direc * rad


def validate_assumptions(model, sample_radius, n_samples, seed=0):
    """Sample the dissipativity, growth, ellipticity and Lipschitz inequalities.

    Margins are ``rhs - lhs`` minimised over the samples, so a negative
    margin is a violation.  Nothing is raised.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    r = model.r
    x = _ball_samples(rng, n_samples, r, sample_radius)
    h = _ball_samples(rng, n_samples, r, sample_radius)
    h[:, np.linalg.norm(h, axis=0) == 0] = sample_radius / math.sqrt(r)
    f = model.reaction
    lam, rho, C = model.lam, model.rho, model.C
    nx = np.linalg.norm(x, axis=0)
    nh = np.linalg.norm(h, axis=0)
    tol = 1e-12

    def result(name, margins, *points):
        i = int(np.argmin(margins))
        worst = float(margins[i])
        scale = 1.0 + float(np.max(np.abs(margins)))
        return CheckResult(name, worst, worst >= -tol * scale,
                           tuple(tuple(p[:, i]) for p in points))

    checks = []
    lhs = np.sum((f(x + h) - f(x)) * h, axis=0) / nh
    rhs = -lam * nh ** (1 + rho) + C * (1 + nx ** (1 + rho))
    checks.append(result("dissipativity", rhs - lhs, x, h))
    checks.append(result("growth", C * (1 + nx ** (1 + rho)) - np.linalg.norm(f(x), axis=0), x))

    g = model.diffusion
    mats = np.moveaxis(g(x), (0, 1), (-2, -1))
    sv = np.linalg.svd(mats, compute_uv=False)
    checks.append(result("g_lower", sv[:, -1] - model.kappa0, x))
    checks.append(result("g_upper", model.kappa1 - sv[:, 0], x))
    y = x + h
    diff = mats - np.moveaxis(g(y), (0, 1), (-2, -1))
    lip = np.linalg.norm(diff, ord=2, axis=(-2, -1))
    checks.append(result("g_lipschitz", model.kappa * nh - lip, x, y))

    step = 1e-6 * np.maximum(1.0, nx)
    jac = f.jacobian(x)
    fd = np.empty_like(jac)
    for k in range(r):
        e = np.zeros((r, 1))
        e[k] = 1.0
        fd[:, k] = (f(x + step * e) - f(x - step * e)) / (2 * step)
    err = np.linalg.norm((fd - jac).reshape(r * r, -1), axis=0)
    rel = err / np.maximum(1.0, np.linalg.norm(jac.reshape(r * r, -1), axis=0))
    checks.append(result("jacobian", 1e-5 - rel, x))
    return ValidationReport(model.name, float(sample_radius), int(n_samples), tuple(checks))
