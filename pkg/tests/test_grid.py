from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import sine
from oracles import dirichlet_eigenvalues, dirichlet_laplacian, heat_semigroup
from spde_exit.errors import EigenUnavailable, NonElliptic, ShapeMismatch
from spde_exit.grid import (GridSpec, apply_A, build_operator, from_modes, h_norm,
                            implicit_solve, semigroup_apply, semigroup_convolution,
                            smoothing_profile, sobolev_norm, sup_norm, to_modes)
from spde_exit.model import allen_cahn, coupled_cubic


def test_grid_spacing_and_nodes():
    g = GridSpec(5.0, 199)
    assert g.spacing * (g.interior_points + 1) == pytest.approx(5.0, abs=1e-14)
    assert g.shape == (1, 199)
    assert g.nodes[0] == pytest.approx(g.spacing)
    assert g.nodes[-1] == pytest.approx(5.0 - g.spacing)


@pytest.mark.parametrize("kwargs", [dict(length=0.0, interior_points=10),
                                    dict(length=1.0, interior_points=2),
                                    dict(length=1.0, interior_points=5, components=0)])
def test_grid_rejects_bad_parameters(kwargs):
    with pytest.raises(ValueError):
        GridSpec(**kwargs)


def test_laplacian_entries(reference):
    _, op = reference
    h = op.grid.spacing
    dense = op.dense()
    assert np.allclose(dense, dirichlet_laplacian(5.0, 199), rtol=1e-13, atol=0)
    assert np.allclose(np.diag(dense), -2 / h**2)
    assert op.symmetric


def test_spectrum_matches_closed_form(reference):
    _, op = reference
    assert np.allclose(op.alpha[0], dirichlet_eigenvalues(5.0, 199), rtol=1e-10)
    assert np.all(np.diff(op.alpha[0]) > 0)
    assert op.alpha[0, 0] == pytest.approx((np.pi / 5) ** 2, rel=1e-4)


def test_eigenvalues_converge_second_order():
    errs = []
    for m in (49, 99, 199):
        op = build_operator(allen_cahn(), GridSpec(5.0, m))
        errs.append(np.abs(op.alpha[0, :3] - (np.arange(1, 4) * np.pi / 5) ** 2))
    errs = np.array(errs)
    ratios = errs[:-1] / errs[1:]
    assert np.all((ratios > 3.5) & (ratios < 4.5))


def test_modulated_operator_symmetric_and_positive():
    model = allen_cahn(modulation=0.5)
    op = build_operator(model, GridSpec(5.0, 99))
    dense = op.dense()
    assert np.allclose(dense, dense.T)
    assert np.all(np.linalg.eigvalsh(-dense) > 0)
    assert np.all(op.alpha > 0)


def test_nonelliptic_rejected():
    model = replace(allen_cahn(), a_coeffs=(lambda xi: xi - 1.0,))
    with pytest.raises(NonElliptic):
        build_operator(model, GridSpec(5.0, 49))


def test_drift_disables_spectral_features():
    op = build_operator(allen_cahn(drift=0.3), GridSpec(5.0, 49))
    assert not op.symmetric and not op.has_eigen
    x = sine(op.grid)
    with pytest.raises(EigenUnavailable):
        semigroup_apply(op, 0.1, x)
    with pytest.raises(EigenUnavailable):
        sobolev_norm(x, 1.0, op)
    y = implicit_solve(op, 0.01, x)
    assert np.allclose(y - 0.01 * apply_A(op, y), x, atol=1e-12)


def test_apply_A_eigenvector(reference):
    _, op = reference
    e1 = op.modes[0, :, 0][None]
    assert np.allclose(apply_A(op, e1), -op.alpha[0, 0] * e1, rtol=0, atol=1e-12 * op.alpha[0, -1])
    assert np.all(apply_A(op, op.grid.zeros()) == 0)


def test_apply_A_second_order_on_sine():
    errs = []
    for m in (49, 99, 199):
        op = build_operator(allen_cahn(), GridSpec(5.0, m))
        x = sine(op.grid)
        errs.append(sup_norm(apply_A(op, x) + (np.pi / 5) ** 2 * x))
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.05)
    assert errs[1] / errs[2] == pytest.approx(4.0, rel=0.05)


def test_apply_A_shape_mismatch(reference):
    _, op = reference
    with pytest.raises(ShapeMismatch):
        apply_A(op, np.zeros((1, 50)))


def test_implicit_solve_eigen_identity(reference):
    _, op = reference
    dt = 0.01
    for k in (0, 3, 50):
        e = op.modes[0, :, k][None]
        assert np.allclose(implicit_solve(op, dt, e), e / (1 + dt * op.alpha[0, k]), atol=1e-12)
    assert np.all(implicit_solve(op, dt, op.grid.zeros()) == 0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), dt=st.floats(1e-5, 10.0), batch=st.integers(1, 5))
def test_implicit_solve_residual(reference, seed, dt, batch):
    _, op = reference
    rhs = np.random.default_rng(seed).standard_normal((batch,) + op.grid.shape)
    y = implicit_solve(op, dt, rhs)
    resid = y - dt * apply_A(op, y) - rhs
    assert np.max(np.abs(resid)) < 1e-10 * max(1.0, np.max(np.abs(rhs)))


def test_implicit_solve_lapack_path_matches_dense():
    # strong drift on a coarse grid breaks diagonal dominance
    op = build_operator(allen_cahn(drift=40.0), GridSpec(5.0, 9))
    rhs = np.random.default_rng(0).standard_normal(op.grid.shape)
    dt = 0.5
    assert op._factor(dt)[0] == "lapack"
    dense = np.eye(9) - dt * op.dense()
    assert np.allclose(implicit_solve(op, dt, rhs)[0], np.linalg.solve(dense, rhs[0]), atol=1e-12)


def test_implicit_solve_two_components():
    model = coupled_cubic()
    op = build_operator(model, GridSpec(5.0, 39, 2))
    rhs = np.random.default_rng(1).standard_normal(op.grid.shape)
    y = implicit_solve(op, 0.05, rhs)
    for c in range(2):
        dense = np.eye(39) - 0.05 * op.dense(c)
        assert np.allclose(y[c], np.linalg.solve(dense, rhs[c]), atol=1e-12)


def test_semigroup_identities(reference):
    _, op = reference
    x = np.random.default_rng(2).standard_normal(op.grid.shape)
    assert np.array_equal(semigroup_apply(op, 0.0, x), x)
    e1 = op.modes[0, :, 0][None]
    assert np.allclose(semigroup_apply(op, 1.0, e1), np.exp(-op.alpha[0, 0]) * e1, atol=1e-12)
    a = semigroup_apply(op, 0.7, x)
    b = semigroup_apply(op, 0.3, semigroup_apply(op, 0.4, x))
    assert np.max(np.abs(a - b)) < 1e-10
    with pytest.raises(ValueError):
        semigroup_apply(op, -1.0, x)


def test_semigroup_matches_matrix_exponential(coarse):
    _, op = coarse
    x = np.random.default_rng(3).standard_normal(op.grid.shape)
    ref = heat_semigroup(5.0, 49, 0.2, x)
    assert np.allclose(semigroup_apply(op, 0.2, x)[0], ref, atol=1e-10)


def test_modes_roundtrip(reference):
    _, op = reference
    x = np.random.default_rng(4).standard_normal((3,) + op.grid.shape)
    assert np.allclose(from_modes(op, to_modes(op, x)), x, atol=1e-11)


def test_sobolev_norm_basics(reference):
    _, op = reference
    x = np.random.default_rng(5).standard_normal(op.grid.shape)
    assert sobolev_norm(x, 0.0, op) == pytest.approx(h_norm(x, op.grid), rel=1e-12)
    e1 = op.modes[0, :, 0][None]
    assert sobolev_norm(e1, 1.0, op) == pytest.approx(np.sqrt(op.alpha[0, 0]), rel=1e-12)


def test_sobolev_norm_monotone_on_rough_field(reference):
    _, op = reference
    saw = np.where(np.arange(199) % 2 == 0, 1.0, -1.0)[None]
    vals = [sobolev_norm(saw, d, op) for d in (0.0, 0.5, 1.0)]
    assert vals[0] < vals[1] < vals[2]


def test_norms_of_constant_field():
    g = GridSpec(5.0, 199)
    one = np.ones(g.shape)
    assert sup_norm(one) == 1.0
    assert h_norm(one, g) == pytest.approx(np.sqrt(5.0 * 199 / 200), rel=1e-14)
    assert sup_norm(g.zeros()) == 0.0 and h_norm(g.zeros(), g) == 0.0


def test_sup_norm_is_euclidean_across_components():
    x = np.zeros((2, 5))
    x[0, 2], x[1, 2] = 3.0, 4.0
    assert sup_norm(x) == pytest.approx(5.0)


def test_h_norm_embedding(reference):
    _, op = reference
    x = np.random.default_rng(6).standard_normal((1000,) + op.grid.shape) * np.random.default_rng(7).uniform(0, 5, (1000, 1, 1))
    assert np.all(h_norm(x, op.grid) <= np.sqrt(5.0) * sup_norm(x) + 1e-12)


def test_smoothing_profile_bounded():
    # the fitted constant from one grid bounds the profile on finer grids
    times = np.geomspace(0.01, 1.0, 40)
    fitted = smoothing_profile(build_operator(allen_cahn(), GridSpec(5.0, 99)), times).max()
    for m in (199, 399):
        prof = smoothing_profile(build_operator(allen_cahn(), GridSpec(5.0, m)), times)
        assert prof.max() <= 1.05 * fitted


def test_convolution_matches_time_stepping(coarse):
    _, op = coarse
    rng = np.random.default_rng(8)
    dt, n = 0.05, 20
    u = rng.standard_normal((n,) + op.grid.shape)
    norms = semigroup_convolution(op, u, dt)
    # exact modal solution for piecewise-constant forcing
    y = np.zeros(op.grid.shape)
    for k in range(n):
        y = semigroup_apply(op, dt, y) + from_modes(op, (1 - np.exp(-op.alpha * dt)) / op.alpha * to_modes(op, u[k]))
    assert norms.h1_sq[-1] == pytest.approx(sobolev_norm(y, 1.0, op) ** 2, rel=1e-10)
    assert norms.control_sq_integral == pytest.approx(dt * np.sum(h_norm(u, op.grid) ** 2), rel=1e-12)
