import numpy as np
import pytest

from switchlq.chain import validate_generator
from switchlq.errors import NotStabilizable, NotStabilizing, Stalled
from switchlq.model import decompose, make_problem
from switchlq.riccati import (finite_horizon_values, integrate_finite_horizon, newton_kleinman, riccati_parts,
                              riccati_rhs, solve_are, synthesize_feedback)
from switchlq.stability import StabilizerPair, certify

from instances import scalar_benchmark

ROOT2 = np.sqrt(2) - 1


def tanh_value(tau):
    # dP/dtau = 1 - 2P - P^2, P(0) = 0
    r = np.sqrt(2)
    return np.sinh(r * tau) / (r * np.cosh(r * tau) + np.sinh(r * tau))


@pytest.mark.parametrize("m0", [1, 2])
def test_scalar_closed_form(m0):
    dm = scalar_benchmark(m0)
    for sol in (solve_are(dm), newton_kleinman(dm)):
        assert np.allclose(sol.P1, ROOT2, atol=1e-10)
        assert np.allclose(sol.P2, ROOT2, atol=1e-10)
        assert np.allclose(sol.theta.theta1, -ROOT2, atol=1e-10)
        assert sol.residual_norm < 1e-8


@pytest.mark.parametrize("c", [0.3, 0.8])
def test_scalar_with_state_noise(c):
    g = validate_generator(np.zeros((1, 1)), warn=False)
    dm = decompose(make_problem(g, 1, 1, A=-1.0, B=1.0, C=c, Q=1.0))
    # component 1: (c^2 - 2) P + 1 - P^2 = 0; component 2: -2 P2 + c^2 P1 + 1 - P2^2 = 0
    a = c**2 - 2
    p1 = (a + np.sqrt(a * a + 4)) / 2
    p2 = -1 + np.sqrt(2 + c**2 * p1)
    sol = solve_are(dm, tol=1e-11)
    assert abs(sol.P1[0, 0, 0] - p1) < 1e-9 and abs(sol.P2[0, 0, 0] - p2) < 1e-9
    nk = newton_kleinman(dm)
    assert abs(nk.P2[0, 0, 0] - p2) < 1e-10


@pytest.mark.parametrize("step", [1e-2, 1e-3])
def test_finite_horizon_matches_closed_form(scalar_dm, step):
    traj = integrate_finite_horizon(scalar_dm, 3.0, step)
    tau = traj.T - traj.times
    err = np.abs(traj.P1[:, 0, 0, 0] - tanh_value(tau)).max()
    assert err < (1e-9 if step == 1e-2 else 1e-12)
    assert traj.P1[-1].max() == 0.0


def test_finite_horizon_values_on_one_pass(scalar_dm):
    Ts = [0.5, 1.0, 4.0]
    vals = finite_horizon_values(scalar_dm, Ts, step=1e-3)
    assert np.allclose(vals[:, 0, 0, 0, 0], tanh_value(np.array(Ts)), atol=1e-12)
    with pytest.raises(ValueError):
        finite_horizon_values(scalar_dm, [2.0, 1.0])


def test_solutions_agree_on_random_suite(suite):
    for dm in suite:
        a = solve_are(dm)
        b = newton_kleinman(dm)
        assert np.abs(a.P1 - b.P1).max() < 1e-6
        assert np.abs(a.P2 - b.P2).max() < 1e-6
        F1, F2 = riccati_rhs(dm, a.P1, a.P2)
        assert max(np.abs(F1).max(), np.abs(F2).max()) < 1e-8
        assert np.all(np.linalg.eigvalsh(a.gain_matrices(dm)) > 0)


def test_monotone_in_horizon(suite):
    Ts = [1, 2, 4, 8, 16]
    for dm in suite[:5]:
        vals = finite_horizon_values(dm, Ts)
        for lo, hi in zip(vals[:-1], vals[1:]):
            assert np.linalg.eigvalsh(hi - lo).min() >= -1e-9


def test_gains_are_stabilizing(suite):
    sol = solve_are(suite[3])
    th = synthesize_feedback(suite[3], sol.P1, sol.P2)
    assert np.allclose(th.theta1, sol.theta.theta1)
    assert certify(suite[3], th).abscissa < 0
    parts = riccati_parts(suite[3], sol.P1, sol.P2)
    assert parts.min_gain_eig > 0


def test_policy_iteration_counts_updates(scalar_dm):
    sol = newton_kleinman(scalar_dm)
    assert 2 <= sol.info["iterations"] <= 10
    steps = sol.info["step_norms"]
    # quadratic convergence in the final steps
    assert steps[-1] < steps[-2] ** 1.5 + 1e-14


def test_unstabilisable_problem_is_rejected():
    g = validate_generator(np.zeros((1, 1)), warn=False)
    dm = decompose(make_problem(g, 1, 1, A=1.0, B=0.0, Q=1.0))
    with pytest.raises(NotStabilizable):
        solve_are(dm, Tmax=64)
    with pytest.raises(NotStabilizing):
        newton_kleinman(dm)


def test_policy_iteration_stall(scalar_dm):
    with pytest.raises(Stalled):
        newton_kleinman(scalar_dm, max_iter=1, tol=1e-300)


def test_initial_gain_must_stabilise():
    g = validate_generator(np.zeros((1, 1)), warn=False)
    dm = decompose(make_problem(g, 1, 1, A=1.0, B=1.0, Q=1.0))
    with pytest.raises(NotStabilizing):
        newton_kleinman(dm)
    th = StabilizerPair(-3 * np.ones((1, 1, 1)), -3 * np.ones((1, 1, 1)))
    sol = newton_kleinman(dm, th)
    # scalar A = B = Q = R = 1: P = 1 + sqrt(2)
    assert np.allclose(sol.P1, 1 + np.sqrt(2), atol=1e-10)
