"""
Spatial discretization of the interval [0, L] with Dirichlet boundary data.

Fields are plain :class:`numpy.ndarray` objects of shape ``(r, M)`` holding
the ``r`` components at the ``M`` interior nodes; batches of fields carry
extra leading axes, ``(..., r, M)``.  Boundary nodes are never stored.

The elliptic operator ``A_i u = (a_i(xi) u')' + b_i(xi) u'`` is assembled with
three-point central differences.  When every ``b_i`` vanishes the matrix is
symmetric negative definite; its eigenpairs ``A e_k = -alpha_k e_k`` are
normalised in the discrete ``H = L^2`` inner product and drive the semigroup,
fractional Sobolev norms and the convolution estimates below.
"""
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.linalg import eigh_tridiagonal
from scipy.linalg.lapack import dgttrf, dgttrs

from .errors import EigenUnavailable, NonElliptic, ShapeMismatch, SingularSystem

EIGEN_LIMIT = 4096


@numba.njit(cache=True)
def _thomas(sub, w, inv, rhs, out):
    # rhs, out: (B, r, M); the batch loop is innermost so it vectorizes
    n, r, m = rhs.shape
    for c in range(r):
        for b in range(n):
            out[b, c, 0] = rhs[b, c, 0] * inv[c, 0]
        for i in range(1, m):
            s = sub[c, i - 1]
            iv = inv[c, i]
            for b in range(n):
                out[b, c, i] = (rhs[b, c, i] - s * out[b, c, i - 1]) * iv
        for i in range(m - 2, -1, -1):
            wi = w[c, i]
            for b in range(n):
                out[b, c, i] -= wi * out[b, c, i + 1]


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid of ``interior_points`` nodes strictly inside ``[0, length]``."""

    length: float
    interior_points: int
    components: int = 1

    def __post_init__(self):
        if not self.length > 0:
            raise ValueError("length must be positive")
        if int(self.interior_points) < 3:
            raise ValueError("need at least 3 interior points")
        if int(self.components) < 1:
            raise ValueError("need at least one component")
        object.__setattr__(self, "interior_points", int(self.interior_points))
        object.__setattr__(self, "components", int(self.components))
        object.__setattr__(self, "length", float(self.length))

    @property
    def spacing(self):
        return self.length / (self.interior_points + 1)

    @property
    def nodes(self):
        return self.spacing * np.arange(1, self.interior_points + 1)

    @property
    def shape(self):
        return (self.components, self.interior_points)

    def zeros(self):
        return np.zeros(self.shape)

    def field(self, fn):
        """Sample ``fn(xi)`` on the interior nodes, broadcasting to all components."""
        vals = np.asarray(fn(self.nodes), dtype=float)
        return np.broadcast_to(vals, self.shape).copy()


@dataclass(eq=False)
class OperatorDisc:
    """Tridiagonal discretization of ``A`` (one matrix per component).

    ``sub[c, i] = A_c[i+1, i]`` and ``sup[c, i] = A_c[i, i+1]``.  ``alpha`` and
    ``modes`` are ``None`` when the eigenbasis is unavailable; otherwise
    ``modes[c, :, k]`` is the H-normalised eigenvector for ``alpha[c, k]``.
    """

    grid: GridSpec
    sub: np.ndarray
    diag: np.ndarray
    sup: np.ndarray
    symmetric: bool
    alpha: np.ndarray = None
    modes: np.ndarray = None
    _factors: dict = field(default_factory=dict, repr=False)

    @property
    def has_eigen(self):
        return self.alpha is not None

    def dense(self, component=0):
        return (np.diag(self.diag[component]) + np.diag(self.sub[component], -1)
                + np.diag(self.sup[component], 1))

    def _require_eigen(self):
        if self.alpha is None:
            raise EigenUnavailable(
                "eigendecomposition unavailable (non-symmetric operator or grid too large)")

    def _factor(self, dt):
        """LU data for ``I - dt A``.

        Diagonally dominant systems (always the case without drift, and with
        drift on fine enough grids) use a pivot-free Thomas sweep; the rest
        go through LAPACK with partial pivoting.
        """
        key = float(dt)
        fac = self._factors.get(key)
        if fac is None:
            lo, d, up = -dt * self.sub, 1.0 - dt * self.diag, -dt * self.sup
            off = np.zeros_like(d)
            off[:, 1:] += np.abs(lo)
            off[:, :-1] += np.abs(up)
            if np.all(d > off):
                w = np.empty_like(up)
                inv = np.empty_like(d)
                inv[:, 0] = 1.0 / d[:, 0]
                for i in range(d.shape[1] - 1):
                    w[:, i] = up[:, i] * inv[:, i]
                    inv[:, i + 1] = 1.0 / (d[:, i + 1] - lo[:, i] * w[:, i])
                fac = ("thomas", lo, w, inv)
            else:
                lu = []
                for c in range(self.grid.components):
                    dl, dd, du, du2, ipiv, info = dgttrf(lo[c], d[c], up[c])
                    if info != 0:
                        raise SingularSystem(f"I - dt*A singular for component {c} (info={info})")
                    lu.append((dl, dd, du, du2, ipiv))
                fac = ("lapack", lu)
            if len(self._factors) > 32:
                self._factors.clear()
            self._factors[key] = fac
        return fac


def _coeff_values(fn, xi):
    return np.broadcast_to(np.asarray(fn(xi), dtype=float), xi.shape)


def build_operator(model, grid):
    """Assemble ``A`` for ``model`` on ``grid``.

    ``model`` only needs ``a_coeffs`` and ``b_coeffs``: one callable of the
    spatial coordinate per component.  Divergence form puts ``a`` on the half
    nodes, which keeps the matrix symmetric for variable ``a(xi)``.
    """
    r, m = grid.shape
    if len(model.a_coeffs) != r or len(model.b_coeffs) != r:
        raise ShapeMismatch(f"model has {len(model.a_coeffs)} components, grid has {r}")
    h = grid.spacing
    xi = grid.nodes
    half = h * (np.arange(m + 1) + 0.5)
    sub = np.empty((r, m - 1))
    sup = np.empty((r, m - 1))
    diag = np.empty((r, m))
    symmetric = True
    for c in range(r):
        a_half = _coeff_values(model.a_coeffs[c], half)
        a_node = _coeff_values(model.a_coeffs[c], xi)
        if np.any(a_half <= 0) or np.any(a_node <= 0):
            raise NonElliptic(f"diffusivity of component {c} is not positive on the grid")
        b = _coeff_values(model.b_coeffs[c], xi)
        diag[c] = -(a_half[:-1] + a_half[1:]) / h**2
        sub[c] = a_half[1:-1] / h**2 - b[1:] / (2 * h)
        sup[c] = a_half[1:-1] / h**2 + b[:-1] / (2 * h)
        if np.any(b != 0):
            symmetric = False
    op = OperatorDisc(grid=grid, sub=sub, diag=diag, sup=sup, symmetric=symmetric)
    if symmetric and m <= EIGEN_LIMIT:
        alpha = np.empty((r, m))
        modes = np.empty((r, m, m))
        for c in range(r):
            lam, vec = eigh_tridiagonal(diag[c], sub[c])
            lam, vec = lam[::-1], vec[:, ::-1]
            vec = vec * np.sign(vec[0])
            alpha[c] = -lam
            modes[c] = vec / np.sqrt(h)
        op.alpha, op.modes = alpha, modes
    return op


def _check(op, x):
    if x.shape[-2:] != op.grid.shape:
        raise ShapeMismatch(f"field shape {x.shape[-2:]} does not match grid {op.grid.shape}")


def apply_A(op, x):
    """Matrix-vector product ``A x`` per component (batched over leading axes)."""
    x = np.asarray(x, dtype=float)
    _check(op, x)
    y = op.diag * x
    y[..., 1:] += op.sub * x[..., :-1]
    y[..., :-1] += op.sup * x[..., 1:]
    return y


def apply_A_transpose(op, x):
    x = np.asarray(x, dtype=float)
    _check(op, x)
    y = op.diag * x
    y[..., 1:] += op.sup * x[..., :-1]
    y[..., :-1] += op.sub * x[..., 1:]
    return y


def implicit_solve(op, dt, rhs):
    """Solve ``(I - dt A) y = rhs`` with a cached tridiagonal LU factorization."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    rhs = np.asarray(rhs, dtype=float)
    _check(op, rhs)
    lead = rhs.shape[:-2]
    r, m = op.grid.shape
    fac = op._factor(dt)
    if fac[0] == "thomas":
        flat = np.ascontiguousarray(rhs.reshape((-1, r, m)))
        out = np.empty_like(flat)
        _thomas(fac[1], fac[2], fac[3], flat, out)
        return out.reshape(rhs.shape)
    out = np.empty_like(rhs)
    for c, (dl, d, du, du2, ipiv) in enumerate(fac[1]):
        b = np.asfortranarray(rhs[..., c, :].reshape(-1, m).T)
        y, info = dgttrs(dl, d, du, du2, ipiv, b)
        if info != 0:
            raise SingularSystem(f"tridiagonal solve failed (info={info})")
        out[..., c, :] = y.T.reshape(lead + (m,))
    return out


def to_modes(op, x):
    """Coefficients ``<x, e_k>_H`` per component, shape ``(..., r, M)``."""
    op._require_eigen()
    x = np.asarray(x, dtype=float)
    _check(op, x)
    return op.grid.spacing * np.einsum("...cj,cjk->...ck", x, op.modes)


def from_modes(op, coeffs):
    op._require_eigen()
    return np.einsum("...ck,cjk->...cj", coeffs, op.modes)


def semigroup_apply(op, t, x):
    """``S(t) x = sum_k exp(-alpha_k t) <x, e_k> e_k``."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    op._require_eigen()
    if t == 0:
        return np.array(x, dtype=float)
    return from_modes(op, np.exp(-op.alpha * t) * to_modes(op, x))


def sobolev_norm(x, delta, op):
    """Fractional Sobolev norm ``sqrt(sum_k alpha_k^delta <x, e_k>^2)``."""
    c = to_modes(op, x)
    return np.sqrt(np.sum(op.alpha**delta * c**2, axis=(-2, -1)))


def sup_norm(x):
    """Supremum over nodes of the Euclidean norm of the ``r`` components."""
    x = np.asarray(x, dtype=float)
    if x.shape[-2] == 1:
        return np.abs(x[..., 0, :]).max(axis=-1)
    return np.sqrt(np.max(np.sum(x * x, axis=-2), axis=-1))


def _spacing(grid):
    return grid.spacing if isinstance(grid, GridSpec) else float(grid)


def h_inner(x, y, grid):
    return _spacing(grid) * np.sum(np.asarray(x) * np.asarray(y), axis=(-2, -1))


def h_norm(x, grid):
    """Discrete ``L^2(0, L)`` norm; the zero boundary values contribute nothing."""
    x = np.asarray(x, dtype=float)
    return np.sqrt(_spacing(grid) * np.sum(x * x, axis=(-2, -1)))


def smoothing_profile(op, times):
    """Exact ``t^(1/4) |S(t)|_{H->E}`` on the given times.

    The operator norm from ``H`` into ``E`` at node ``j`` is the H-norm of the
    discrete heat kernel row, ``sqrt(sum_k exp(-2 alpha_k t) e_k(xi_j)^2)``.
    """
    op._require_eigen()
    times = np.atleast_1d(np.asarray(times, dtype=float))
    out = np.empty(times.shape)
    sq = op.modes**2
    for i, t in enumerate(times):
        kern = np.einsum("cjk,ck->cj", sq, np.exp(-2.0 * op.alpha * t))
        out[i] = t**0.25 * np.sqrt(kern.max())
    return out


@dataclass(frozen=True)
class ConvolutionNorms:
    """Norms of ``Lambda u(t) = int_0^t S(t-s) u(s) ds`` for piecewise-constant ``u``.

    ``h1_sq[n]`` is ``|Lambda u(t_n)|_{H^1}^2`` at the step boundaries,
    ``h2_sq_integral`` the exact ``int_0^T |Lambda u|_{H^2}^2 dt`` and
    ``control_sq_integral`` the matching ``int_0^T |u|_H^2 dt``.
    """

    h1_sq: np.ndarray
    h2_sq_integral: float
    control_sq_integral: float


def semigroup_convolution(op, u, dt):
    """Evaluate the convolution ``Lambda u`` mode by mode, exactly in time.

    On a step of length ``h`` with constant modal forcing ``c`` the mode obeys
    ``y(s) = c/alpha + (y0 - c/alpha) exp(-alpha s)``, which integrates in
    closed form.
    """
    u = np.asarray(u, dtype=float)
    uc = to_modes(op, u)
    alpha = op.alpha
    decay = np.exp(-alpha * dt)
    y = np.zeros_like(uc[0])
    h1 = [0.0]
    h2 = 0.0
    for c in uc:
        b = c / alpha
        d = y - b
        seg = (b * b * dt + 2 * b * d * (1 - decay) / alpha
               + d * d * (1 - decay**2) / (2 * alpha))
        h2 += float(np.sum(alpha**2 * seg))
        y = b + d * decay
        h1.append(float(np.sum(alpha * y * y)))
    return ConvolutionNorms(h1_sq=np.array(h1), h2_sq_integral=h2,
                            control_sq_integral=float(dt * np.sum(uc**2)))
