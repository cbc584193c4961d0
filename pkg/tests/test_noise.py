import numpy as np
import pytest
from scipy import stats

from spde_exit.grid import GridSpec, build_operator, to_modes
from spde_exit.model import allen_cahn
from spde_exit.noise import (BLOCK_STEPS, BatchNoise, NoiseStream, increment_at,
                             sample_increment, split_stream)


def _draws(stream, grid, dt, n):
    return np.array([sample_increment(stream, grid, dt) for _ in range(n)])


def test_increment_variance():
    grid = GridSpec(5.0, 199)  # spacing 0.025
    dt = 1e-3
    z = _draws(NoiseStream(11), grid, dt, 100_000 // 199 + 1).ravel()
    var = z.var()
    se = 0.04 * np.sqrt(2.0 / len(z))
    assert abs(var - 0.04) < 3 * se


def test_increment_cross_covariance():
    grid = GridSpec(1.0, 3)
    z = _draws(NoiseStream(12), grid, 0.01, 100_000)[:, 0, :]
    z /= z.std(axis=0)
    cov = (z[:, 0] * z[:, 1]).mean()
    assert abs(cov) < 4 / np.sqrt(len(z))


def test_same_triple_same_field():
    grid = GridSpec(5.0, 49)
    s = NoiseStream(3, (1,))
    a = increment_at(s, grid, 1e-3, 1000)
    b = increment_at(NoiseStream(3, (1,)), grid, 1e-3, 1000)
    assert np.array_equal(a, b)
    assert s.step_counter == 0


def test_replay_reproduces_sequence():
    grid = GridSpec(5.0, 49)
    first = _draws(NoiseStream(5, (2,)), grid, 1e-3, 3 * BLOCK_STEPS + 5)
    again = _draws(NoiseStream(5, (2,)), grid, 1e-3, 3 * BLOCK_STEPS + 5)
    assert np.array_equal(first, again)
    assert np.array_equal(first[130], increment_at(NoiseStream(5, (2,)), grid, 1e-3, 130))


def test_split_is_pure_and_independent():
    grid = GridSpec(5.0, 99)
    root = NoiseStream(9)
    a, b = split_stream(root, 0), split_stream(root, 1)
    assert root.spawn_key == () and root.step_counter == 0
    assert np.array_equal(increment_at(split_stream(root, 1), grid, 1.0, 0),
                          increment_at(b, grid, 1.0, 0))
    # 1.6e5 pairs put the 0.01 threshold at four standard errors
    za = _draws(a, grid, 1.0, 1617).ravel()
    zb = _draws(b, grid, 1.0, 1617).ravel()
    assert abs(np.corrcoef(za, zb)[0, 1]) < 0.01
    with pytest.raises(ValueError):
        split_stream(root, -1)


def test_nonpositive_dt_rejected():
    with pytest.raises(ValueError):
        sample_increment(NoiseStream(0), GridSpec(1.0, 5), 0.0)


def test_batch_matches_individual_streams():
    grid = GridSpec(5.0, 49)
    root = NoiseStream(21)
    streams = [split_stream(root, i) for i in range(4)]
    batch = BatchNoise(streams, grid, 1e-3)
    active = np.array([True, True, False, True])
    rows = [batch.draw()]
    for _ in range(BLOCK_STEPS + 3):
        rows.append(batch.draw(active))
    batch.sync()
    assert [s.step_counter for s in streams] == [BLOCK_STEPS + 4, BLOCK_STEPS + 4, 1, BLOCK_STEPS + 4]
    for k, row in enumerate(rows[1:], start=1):
        want = [increment_at(split_stream(root, i), grid, 1e-3, k) for i in (0, 1, 3)]
        assert np.array_equal(row, np.array(want))


def test_modal_coefficients_are_standard_normal():
    grid = GridSpec(5.0, 99)
    op = build_operator(allen_cahn(), grid)
    dt = 0.01
    z = _draws(NoiseStream(31), grid, dt, 10_000)
    coeffs = to_modes(op, z)[:, 0, :5] / np.sqrt(dt)
    edges = stats.norm.ppf(np.linspace(0, 1, 21))
    for k in range(5):
        counts, _ = np.histogram(coeffs[:, k], edges)
        p = stats.chisquare(counts).pvalue
        assert p > 1e-3
    corr = np.corrcoef(coeffs.T)
    assert np.max(np.abs(corr - np.eye(5))) < 4 / np.sqrt(10_000)
