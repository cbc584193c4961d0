"""
Independent reference computations used by the tests.

Nothing here imports the package: the Laplacian, Newton iteration, energy
and semigroup are rebuilt from scratch with dense numpy/scipy linear
algebra so that agreement with the package is a genuine cross-check.
"""
import numpy as np
from scipy.linalg import expm

# V(u+, 0) = -2 S(u+) for f(u) = u - u^3, a = 1, L = 5, M = 199, computed by
# allen_cahn_equilibrium + discrete_energy below and frozen here.
V_REFERENCE = 0.6340594828243736


def dirichlet_laplacian(length, m, a=1.0):
    h = length / (m + 1)
    return a * (np.diag(-2.0 * np.ones(m)) + np.diag(np.ones(m - 1), 1)
                + np.diag(np.ones(m - 1), -1)) / h**2


def discrete_energy(u, length, a=1.0):
    """``S(u) = int 1/2 a u'^2 - 1/2 u^2 + 1/4 u^4`` with zero boundary values.

    The gradient term is a sum over the M+1 cells including both boundary
    cells, which is exactly the energy whose gradient is ``-(A u + f(u))``
    for the three-point Laplacian.
    """
    u = np.ravel(u)
    h = length / (len(u) + 1)
    padded = np.concatenate([[0.0], u, [0.0]])
    grad = 0.5 * a * h * np.sum((np.diff(padded) / h) ** 2)
    pot = h * np.sum(-0.5 * u**2 + 0.25 * u**4)
    return grad + pot


def allen_cahn_equilibrium(length, m, amplitude=1.0, mode=1, tol=1e-13, max_iter=100):
    """Plain Newton for ``A u + u - u^3 = 0`` from a sine seed (dense Jacobian)."""
    lap = dirichlet_laplacian(length, m)
    xi = length / (m + 1) * np.arange(1, m + 1)
    u = amplitude * np.sin(mode * np.pi * xi / length)
    for _ in range(max_iter):
        res = lap @ u + u - u**3
        if np.max(np.abs(res)) < tol:
            break
        jac = lap + np.diag(1.0 - 3.0 * u**2)
        u = u - np.linalg.solve(jac, res)
    return u


def reference_quasipotential(length=5.0, m=199):
    u = allen_cahn_equilibrium(length, m)
    return 2.0 * (discrete_energy(np.zeros(m), length) - discrete_energy(u, length))


def heat_semigroup(length, m, t, x, a=1.0):
    """``exp(t A) x`` by a dense matrix exponential."""
    return expm(t * dirichlet_laplacian(length, m, a)) @ np.ravel(x)


def dirichlet_eigenvalues(length, m, a=1.0):
    """Closed form of the three-point Dirichlet spectrum: ``4a/h^2 sin^2(k pi h / 2L)``."""
    h = length / (m + 1)
    k = np.arange(1, m + 1)
    return 4.0 * a / h**2 * np.sin(k * np.pi * h / (2 * length)) ** 2
