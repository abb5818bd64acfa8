import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from switchlq.chain import validate_generator
from switchlq.errors import DimensionMismatch, SingularOperator
from switchlq.model import decompose, make_problem
from switchlq.stability import (Infeasible, StabilityCertificate, StabilizerPair, certify, closed_loop,
                                is_stabilizer, lyapunov_operator, lyapunov_residual, second_moment_generator,
                                smat, solve_coupled_lyapunov, spectral_abscissa, svec, sym_basis)

from instances import fast_switching

# eigenvalues of [[2 - 10, 1], [10, -2 - 1]]: (-11 +- sqrt(65)) / 2
SWITCHING_ABSCISSA = (-11 + np.sqrt(65)) / 2


def scalar(A, C=0.0, m0=1):
    g = validate_generator(np.zeros((1, 1)) if m0 == 1 else [[-1.0, 1.0], [1.0, -1.0]], warn=False)
    return decompose(make_problem(g, 1, 1, A=A, C=C, Q=1.0))


def test_fast_switching_certificate(switching_dm):
    cert = certify(switching_dm)
    assert isinstance(cert, StabilityCertificate)
    assert abs(cert.abscissa - SWITCHING_ABSCISSA) < 1e-12
    # identity right-hand side: -8 P(1) + 10 P(2) = -1, P(1) - 3 P(2) = -1
    assert np.allclose(cert.P1[:, 0, 0], [13 / 14, 9 / 14], atol=1e-14)
    assert np.allclose(cert.P2, cert.P1)
    ratio = cert.P1[1, 0, 0] / cert.P1[0, 0, 0]
    assert 1 / 3 < ratio < 4 / 5
    assert cert.epsilon > 0


def test_unstable_regime_alone_is_not_enough():
    # regime 0 of the fast-switching model is unstable on its own; slow switching destroys stability
    g = validate_generator([[-0.1, 0.1], [1.0, -1.0]])
    dm = decompose(make_problem(g, 1, 1, A=[1.0, -1.0], Q=1.0))
    res = certify(dm)
    assert isinstance(res, Infeasible) and res.abscissa > 0
    assert not is_stabilizer(dm)


@pytest.mark.parametrize("A, C", [(-1.0, 0.0), (-1.0, 0.5), (-0.3, 0.7), (-2.0, 1.5)])
def test_scalar_noise_oracle(A, C):
    dm = scalar(A, C)
    a = 2 * A + C**2
    cert = certify(dm)
    assert abs(cert.abscissa - a) < 1e-12
    # component 1 sees the noise, component 2 only its drift; component 1 also carries C^2 P1 into P2
    p1 = -1 / a
    assert np.allclose(cert.P1, p1)
    assert np.allclose(cert.P2, -(1 + C**2 * p1) / (2 * A))


def test_noise_destabilises():
    assert not is_stabilizer(scalar(-1.0, 1.5))


def test_feedback_stabilises():
    dm = scalar(1.0)
    dm = decompose(make_problem(dm.gen, 1, 1, A=1.0, B=1.0, Q=1.0))
    assert not is_stabilizer(dm)
    th = StabilizerPair(-2 * np.ones((1, 1, 1)), -2 * np.ones((1, 1, 1)))
    assert is_stabilizer(dm, th)
    A1, _ = closed_loop(dm, th, 1)
    assert A1[0, 0, 0] == -1.0
    with pytest.raises(DimensionMismatch):
        closed_loop(dm, StabilizerPair(np.zeros((1, 2, 1)), np.zeros((1, 2, 1))), 1)


def test_singular_operator():
    dm = scalar(0.0)
    with pytest.raises(SingularOperator):
        solve_coupled_lyapunov(dm, None, np.eye(1), np.eye(1))
    assert not is_stabilizer(dm)


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_sym_basis_is_orthonormal(n):
    U = sym_basis(n)
    assert U.shape == (n * n, n * (n + 1) // 2)
    assert np.allclose(U.T @ U, np.eye(U.shape[1]))


@settings(max_examples=40, deadline=None)
@given(arrays(float, (3, 3), elements=st.floats(-5, 5)))
def test_svec_roundtrip_preserves_inner_product(M):
    S = M + M.T
    assert np.allclose(smat(svec(S), 3), S)
    assert np.isclose(svec(S) @ svec(S), np.sum(S * S))


def test_lyapunov_operator_matches_direct_residual(suite):
    rng = np.random.default_rng(0)
    dm = suite[0]
    th = StabilizerPair(rng.normal(size=(2, 1, 2)), rng.normal(size=(2, 1, 2)))
    P1 = np.array([np.cov(rng.normal(size=(2, 5))) for _ in range(2)])
    P2 = np.array([np.cov(rng.normal(size=(2, 5))) for _ in range(2)])
    r1, r2 = lyapunov_residual(dm, th, P1, P2)
    x = np.concatenate([svec(M) for M in list(P1) + list(P2)])
    y = lyapunov_operator(dm, th) @ x
    expect = np.concatenate([svec(M) for M in list(r1) + list(r2)])
    assert np.allclose(y, expect)


def test_moment_generator_is_block_triangular(suite):
    dm = suite[1]
    G = second_moment_generator(dm)
    p = 3 * dm.m0
    # component-2 moments do not feel component 1
    assert not G[p:, :p].any()
    assert spectral_abscissa(G) < 0


def test_certificate_decay_margin(suite):
    for dm in suite[:5]:
        cert = certify(dm)
        r1, r2 = lyapunov_residual(dm, None, cert.P1, cert.P2)
        for R, P in ((r1, cert.P1), (r2, cert.P2)):
            for i in range(dm.m0):
                assert np.linalg.eigvalsh(-R[i] - cert.epsilon * P[i])[0] > -1e-10
                assert np.allclose(R[i], -np.eye(2))


def test_spectral_abscissa_requires_square():
    with pytest.raises(DimensionMismatch):
        spectral_abscissa(np.zeros((2, 3)))
