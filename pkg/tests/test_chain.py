import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from switchlq.chain import (ChainPath, apply_generator, compensated_increments, path_rng, paths_to_arrays,
                            sample_path, transition_matrix, validate_generator)
from switchlq.errors import DimensionMismatch, NegativeRate, NonSquare, RowSumViolation, ZeroRateWarning

LAM = [[-10.0, 10.0], [1.0, -1.0]]


def rates(m0):
    return arrays(float, (m0, m0), elements=st.floats(0.0, 5.0))


def as_generator(off):
    off = off.copy()
    np.fill_diagonal(off, 0.0)
    return off - np.diag(off.sum(axis=1))


@pytest.mark.parametrize("lam, exc", [
    ([[1.0, -1.0]], NonSquare),
    ([[-1.0, 1.0], [-0.5, 0.5]], NegativeRate),
    ([[-1.0, 0.5], [1.0, -1.0]], RowSumViolation),
    ([[np.nan]], NonSquare),
])
def test_invalid_generators(lam, exc):
    with pytest.raises(exc):
        validate_generator(lam)


def test_zero_rate_warns_and_is_recorded():
    with pytest.warns(ZeroRateWarning):
        g = validate_generator([[0.0, 0.0], [1.0, -1.0]])
    assert g.zero_rates == ((0, 1),)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        validate_generator([[0.0, 0.0], [1.0, -1.0]], warn=False)


def test_stationary_distribution():
    g = validate_generator(LAM)
    assert np.allclose(g.stationary(), [1 / 11, 10 / 11])
    assert np.allclose(g.exit_rates(), [10.0, 1.0])


def test_transition_matrix_two_state_closed_form():
    g = validate_generator(LAM)
    t = 0.3
    # two-state chain: P = pi + exp(-(a+b)t)(I - pi)
    pi = np.array([[1, 10], [1, 10]]) / 11
    expect = pi + np.exp(-11 * t) * (np.eye(2) - pi)
    assert np.allclose(transition_matrix(g, t), expect, atol=1e-13)
    assert np.array_equal(transition_matrix(g, 0.0), np.eye(2))
    with pytest.raises(ValueError):
        transition_matrix(g, -1.0)


@settings(max_examples=40, deadline=None)
@given(rates(3), st.floats(0.0, 10.0))
def test_transition_rows_are_distributions(off, t):
    g = validate_generator(as_generator(off), warn=False)
    P = transition_matrix(g, t)
    assert np.all(P >= 0)
    assert np.allclose(P.sum(axis=1), 1.0)


@settings(max_examples=30, deadline=None)
@given(rates(3), arrays(float, (3, 2), elements=st.floats(-10, 10)))
def test_generator_annihilates_constants(off, sigma):
    g = validate_generator(as_generator(off), warn=False)
    assert np.allclose(apply_generator(g, np.ones(3)), 0.0, atol=1e-12)
    out = apply_generator(g, sigma)
    assert np.allclose(out[1], apply_generator(g, sigma, 1))
    with pytest.raises(DimensionMismatch):
        apply_generator(g, np.ones(2))


def test_sample_path_reproducible_and_valid():
    g = validate_generator(LAM)
    a = sample_path(g, 0.0, 0, 5.0, path_rng(3, 7))
    b = sample_path(g, 0.0, 0, 5.0, path_rng(3, 7))
    assert np.array_equal(a.jump_times, b.jump_times)
    assert np.array_equal(a.regimes, b.regimes)
    assert a.regimes[0] == 0 and a.jump_times[-1] <= 5.0
    c = sample_path(g, 0.0, 0, 5.0, path_rng(3, 8))
    assert not np.array_equal(a.jump_times, c.jump_times)


def test_absorbing_state_never_leaves():
    g = validate_generator([[0.0, 0.0], [1.0, -1.0]], warn=False)
    p = sample_path(g, 1.0, 0, 50.0, 0)
    assert p.n_jumps == 0 and p.regime_at(30.0) == 0


def test_sampled_occupation_matches_transition_law():
    g = validate_generator(LAM)
    T = 2.0
    paths = [sample_path(g, 0.0, 0, T, path_rng(11, i)) for i in range(4000)]
    end = np.array([p.regime_at(T) for p in paths])
    p1 = transition_matrix(g, T)[0, 1]
    se = np.sqrt(p1 * (1 - p1) / end.size)
    assert abs(end.mean() - p1) < 4 * se
    # mean holding time in regime 0 is 1/10
    first = np.array([p.jump_times[0] for p in paths if p.n_jumps])
    assert abs(first.mean() - 0.1) < 4 * first.std() / np.sqrt(first.size)


def test_compensated_jumps_have_zero_mean():
    g = validate_generator(LAM)
    ms = np.array([compensated_increments(g, sample_path(g, 0.0, 1, 3.0, path_rng(5, i))).martingale
                   for i in range(3000)])
    z = ms.mean(axis=0) / (ms.std(axis=0) / np.sqrt(len(ms)) + 1e-300)
    off = ~np.eye(2, dtype=bool)
    assert np.all(np.abs(z[off]) < 4)
    assert np.all(ms[:, ~off] == 0)


def test_chain_path_checks_and_helpers(tmp_path):
    with pytest.raises(ValueError):
        ChainPath(0.0, 1.0, [0.5], [0])
    with pytest.raises(ValueError):
        ChainPath(0.0, 1.0, [0.5, 0.4], [0, 1, 0])
    with pytest.raises(ValueError):
        ChainPath(0.0, 1.0, [0.5], [1, 1])
    p = ChainPath(0.0, 2.0, [0.5, 1.5], [0, 1, 0])
    assert np.allclose(p.occupation(2), [1.0, 1.0])
    assert np.allclose(p.occupation(2, 1.0), [0.5, 0.5])
    assert list(p.regime_at([0.0, 0.5, 1.7])) == [0, 1, 0]
    p.to_csv(tmp_path / "chain.csv")
    lines = (tmp_path / "chain.csv").read_text().splitlines()
    assert lines[0] == "t_jump,regime" and lines[1] == "0.0,0" and lines[2] == "0.5,1"
    jt, rg, nj = paths_to_arrays([p, ChainPath(0.0, 2.0, [], [1])])
    assert nj.tolist() == [2, 0]
    assert np.isinf(jt[1]).all() and rg[1].tolist() == [1, 1, 1]
