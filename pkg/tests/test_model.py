import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spde_exit.errors import NonFiniteOutput, SingularDiffusion
from spde_exit.grid import GridSpec, h_norm, sup_norm
from spde_exit.model import (BUILTIN_MODELS, DiagonalDiffusion, ModelSpec, allen_cahn,
                             apply_G, apply_G_inverse, coupled_cubic, eval_DF, eval_F,
                             polynomial_model, validate_assumptions)

GRID = GridSpec(5.0, 199)


def test_allen_cahn_reaction_values():
    m = allen_cahn()
    assert np.all(eval_F(m, GRID.zeros()) == 0)
    assert np.all(eval_F(m, np.full(GRID.shape, 2.0)) == -6.0)


def test_overflow_is_reported():
    with pytest.raises(NonFiniteOutput):
        eval_F(allen_cahn(), np.full(GRID.shape, 1e200))


def test_growth_bound_on_random_fields():
    m = allen_cahn()
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1000,) + GRID.shape) * rng.uniform(0, 10, (1000, 1, 1))
    lhs = sup_norm(eval_F(m, x))
    assert np.all(lhs <= m.C * (1 + sup_norm(x) ** (1 + m.rho)))


def test_eval_F_commutes_with_permutation():
    m = coupled_cubic()
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 31))
    perm = rng.permutation(31)
    assert np.array_equal(eval_F(m, x)[:, perm], eval_F(m, x[:, perm]))


@pytest.mark.parametrize("model", [allen_cahn(), coupled_cubic(),
                                   allen_cahn(noise_beta=0.25)])
def test_jacobian_matches_finite_differences(model):
    rng = np.random.default_rng(2)
    f = model.reaction
    u = 2.0 * rng.standard_normal((model.r, 100))
    jac = f.jacobian(u)
    step = 1e-6
    for k in range(model.r):
        e = np.zeros((model.r, 1))
        e[k] = step
        fd = (f(u + e) - f(u - e)) / (2 * step)
        assert np.allclose(jac[:, k], fd, rtol=1e-5, atol=1e-7)


def test_field_jacobian_shape_and_values():
    m = coupled_cubic()
    x = np.random.default_rng(3).standard_normal((2, 7))
    df = eval_DF(m, x)
    assert df.shape == (2, 2, 7)
    for j in range(7):
        assert np.allclose(df[:, :, j], m.reaction.jacobian(x[:, j:j + 1])[:, :, 0])


def test_identity_diffusion():
    m = allen_cahn()
    h = np.random.default_rng(4).standard_normal(GRID.shape)
    assert np.array_equal(apply_G(m, GRID.zeros(), h), h)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), beta=st.floats(0.0, 0.9))
def test_diffusion_inverse_roundtrip(seed, beta):
    m = allen_cahn(noise_beta=beta)
    rng = np.random.default_rng(seed)
    x = 3.0 * rng.standard_normal(GRID.shape)
    h = rng.standard_normal(GRID.shape)
    assert np.allclose(apply_G_inverse(m, x, apply_G(m, x, h)), h, rtol=1e-12, atol=1e-12)


def test_multiplicative_inverse_bound():
    m = BUILTIN_MODELS["allen_cahn_multiplicative"]()
    assert (m.kappa0, m.kappa1, m.kappa) == pytest.approx((0.75, 1.25, 0.25))
    rng = np.random.default_rng(5)
    x = 5.0 * rng.standard_normal((1000,) + GRID.shape)
    h = rng.standard_normal((1000,) + GRID.shape)
    assert np.all(h_norm(apply_G_inverse(m, x, h), GRID) <= h_norm(h, GRID) / 0.75 + 1e-12)


def test_singular_diffusion_reported():
    m = allen_cahn(noise_beta=0.5)
    bad = ModelSpec(**{**m.__dict__, "diffusion": DiagonalDiffusion(1, 1.0, -1.0)})
    x = np.full(GRID.shape, 1e3)
    with pytest.raises(SingularDiffusion):
        apply_G_inverse(bad, x, np.ones(GRID.shape))


def test_reference_assumptions_hold():
    report = validate_assumptions(allen_cahn(), sample_radius=10.0, n_samples=1000)
    assert report.passed
    assert set(c.name for c in report.checks) >= {"dissipativity", "growth", "g_lower",
                                                  "g_upper", "g_lipschitz"}


def test_multiplicative_assumptions_hold():
    assert validate_assumptions(allen_cahn(noise_beta=0.25), 10.0, 1000).passed


def test_coupled_assumptions_hold():
    assert validate_assumptions(coupled_cubic(), 10.0, 1000).passed


def test_linear_reaction_fails_dissipativity():
    m = polynomial_model(1, [(0, 1.0, (1,))], lam=0.5, rho=2.0, C=10.0)
    report = validate_assumptions(m, 10.0, 1000)
    assert not report.passed
    assert report["dissipativity"].margin < 0
    assert report["growth"].passed


def test_validation_rejects_empty_sample():
    with pytest.raises(ValueError):
        validate_assumptions(allen_cahn(), 1.0, 0)


def test_model_invariants():
    with pytest.raises(ValueError):
        ModelSpec(**{**allen_cahn().__dict__, "kappa0": 2.0})
    with pytest.raises(ValueError):
        ModelSpec(**{**allen_cahn().__dict__, "lam": 0.0})


def test_field_dissipativity_at_argmax_node():
    # (F(x+h) - F(x))(xi*) . h(xi*) / |h|_E at the node where |h| peaks
    m = allen_cahn()
    rng = np.random.default_rng(6)
    for _ in range(200):
        x = rng.uniform(0, 5) * rng.standard_normal(GRID.shape)
        h = rng.uniform(0, 5) * rng.standard_normal(GRID.shape)
        j = np.argmax(np.abs(h[0]))
        nh = abs(h[0, j])
        lhs = (eval_F(m, x + h) - eval_F(m, x))[0, j] * h[0, j] / nh
        rhs = -m.lam * nh ** (1 + m.rho) + m.C * (1 + sup_norm(x) ** (1 + m.rho))
        assert lhs <= rhs
