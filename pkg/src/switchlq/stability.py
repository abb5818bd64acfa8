"""Mean-square stability of the closed-loop decomposed system.

The second moments ``V_k(i) = E[X_k X_k^T 1{alpha = i}]`` of a closed loop
``u_k = Theta_k X_k`` obey a linear ODE. Stability is decided from the
spectrum of that ODE's matrix, and certificates come from the adjoint
(coupled Lyapunov) equation. Symmetric matrices are vectorised in the
orthonormal basis of ``S^n`` so the adjoint is a plain transpose.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import linalg

from .errors import DimensionMismatch, EigenFailure, SingularOperator
from .model import DecomposedModel

SINGULAR_TOL = 1e-10


@dataclass(frozen=True)
class StabilizerPair:
    """Feedback gains ``Theta_1, Theta_2``, each of shape (m0, m, n)."""

    theta1: np.ndarray
    theta2: np.ndarray

    @classmethod
    def zeros(cls, dm: DecomposedModel) -> "StabilizerPair":
        z = np.zeros((dm.m0, dm.m, dm.n))
        return cls(z, z.copy())

    def __getitem__(self, k: int) -> np.ndarray:
        return self.theta1 if k == 1 else self.theta2

    def shifted(self, delta: float) -> "StabilizerPair":
        return StabilizerPair(self.theta1 + delta, self.theta2 + delta)


@dataclass(frozen=True)
class StabilityCertificate:
    """Positive-definite ``P_1, P_2`` with decay margin ``epsilon``."""

    P1: np.ndarray
    P2: np.ndarray
    epsilon: float
    abscissa: float

    def to_dict(self) -> dict:
        return {"P1": self.P1.tolist(), "P2": self.P2.tolist(), "epsilon": self.epsilon, "abscissa": self.abscissa}


@dataclass(frozen=True)
class Infeasible:
    """No certificate exists for the given gains."""

    reason: str
    abscissa: float

    def to_dict(self) -> dict:
        return {"infeasible": True, "reason": self.reason, "abscissa": self.abscissa}


@lru_cache(maxsize=16)
def sym_basis(n: int) -> np.ndarray:
    """Columns are ``vec(E)`` (column-major) for an orthonormal basis of ``S^n``."""
    cols = []
    for a in range(n):
        for b in range(a, n):
            E = np.zeros((n, n))
            if a == b:
                E[a, a] = 1.0
            else:
                E[a, b] = E[b, a] = np.sqrt(0.5)
            cols.append(E.reshape(-1, order="F"))
    U = np.array(cols).T
    U.setflags(write=False)
    return U


def svec(M: np.ndarray) -> np.ndarray:
    n = M.shape[-1]
    return sym_basis(n).T @ M.reshape(-1, order="F")


def smat(v: np.ndarray, n: int) -> np.ndarray:
    M = (sym_basis(n) @ v).reshape(n, n, order="F")
    return 0.5 * (M + M.T)


def closed_loop(dm: DecomposedModel, theta: StabilizerPair | None, k: int) -> tuple[np.ndarray, np.ndarray]:
    """``(A_k + B_k Theta_k, C_k + D_k Theta_k)`` stacked over regimes."""
    c = dm.comp(k)
    if theta is None:
        return c.A, c.C
    th = theta[k]
    if th.shape != (dm.m0, dm.m, dm.n):
        raise DimensionMismatch(f"Theta_{k} must have shape {(dm.m0, dm.m, dm.n)}, got {th.shape}")
    return c.A + c.B @ th, c.C + c.D @ th


def second_moment_generator(dm: DecomposedModel, theta: StabilizerPair | None = None) -> np.ndarray:
    """Matrix of the closed-loop second-moment ODE.

    The unknown is ``(V_1(0), ..., V_1(m0-1), V_2(0), ..., V_2(m0-1))`` with
    each block in ``svec`` coordinates, so the size is ``2 * m0 * n(n+1)/2``.
    """
    n, m0 = dm.n, dm.m0
    U = sym_basis(n)
    p = U.shape[1]
    I = np.eye(n)
    A1, C1 = closed_loop(dm, theta, 1)
    A2, C2 = closed_loop(dm, theta, 2)
    lam = dm.gen.lam
    G = np.zeros((2 * m0 * p, 2 * m0 * p))

    def blk(k, i):
        o = ((k - 1) * m0 + i) * p
        return slice(o, o + p)

    for i in range(m0):
        lyap1 = np.kron(I, A1[i]) + np.kron(A1[i], I) + np.kron(C1[i], C1[i])
        G[blk(1, i), blk(1, i)] = U.T @ lyap1 @ U
        G[blk(1, i), blk(2, i)] = U.T @ np.kron(C2[i], C2[i]) @ U
        lyap2 = np.kron(I, A2[i]) + np.kron(A2[i], I)
        G[blk(2, i), blk(2, i)] = U.T @ lyap2 @ U
        for j in range(m0):
            # inflow from regime j
            for k in (1, 2):
                G[blk(k, i), blk(k, j)] += lam[j, i] * np.eye(p)
    return G


def spectral_abscissa(op: np.ndarray) -> float:
    """Largest real part of the eigenvalues of ``op``."""
    op = np.asarray(op, dtype=float)
    if op.ndim != 2 or op.shape[0] != op.shape[1]:
        raise DimensionMismatch("operator must be square")
    try:
        ev = linalg.eigvals(op)
    except (linalg.LinAlgError, ValueError) as exc:
        raise EigenFailure(str(exc)) from None
    if not np.all(np.isfinite(ev)):
        raise EigenFailure("non-finite eigenvalues")
    return float(np.max(ev.real))


def lyapunov_operator(dm: DecomposedModel, theta: StabilizerPair | None = None) -> np.ndarray:
    """Matrix of ``(P_1, P_2) -> (residual_1, residual_2)``; the transpose of the moment generator."""
    return second_moment_generator(dm, theta).T


def _unstack(x: np.ndarray, m0: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    p = n * (n + 1) // 2
    blocks = np.array([smat(x[i * p:(i + 1) * p], n) for i in range(2 * m0)])
    return blocks[:m0], blocks[m0:]


def _stack(F1: np.ndarray, F2: np.ndarray) -> np.ndarray:
    return np.concatenate([svec(M) for M in list(F1) + list(F2)])


def lyapunov_residual(dm: DecomposedModel, theta: StabilizerPair | None, P1, P2) -> tuple[np.ndarray, np.ndarray]:
    """Left-hand sides of the coupled Lyapunov equations, evaluated directly."""
    A1, C1 = closed_loop(dm, theta, 1)
    A2, C2 = closed_loop(dm, theta, 2)
    lam = dm.gen.lam
    gP1 = np.tensordot(lam, P1, axes=(1, 0))
    gP2 = np.tensordot(lam, P2, axes=(1, 0))
    t = lambda X: np.swapaxes(X, -1, -2)
    r1 = gP1 + t(A1) @ P1 + P1 @ A1 + t(C1) @ P1 @ C1
    r2 = gP2 + t(A2) @ P2 + P2 @ A2 + t(C2) @ P1 @ C2
    return 0.5 * (r1 + t(r1)), 0.5 * (r2 + t(r2))


def solve_coupled_lyapunov(dm: DecomposedModel, theta: StabilizerPair | None, L1, L2, abscissa: float | None = None):
    """Solve the coupled Lyapunov equations with right-hand sides ``-L1, -L2``.

    Returns
    -------
    (P1, P2) or Infeasible
        Infeasible when some returned ``P_k(i)`` is not positive definite.

    Raises
    ------
    SingularOperator
        If the spectral abscissa lies within ``1e-10`` of zero.
    """
    n, m0 = dm.n, dm.m0
    L1 = np.broadcast_to(np.asarray(L1, float), (m0, n, n))
    L2 = np.broadcast_to(np.asarray(L2, float), (m0, n, n))
    G = second_moment_generator(dm, theta)
    if abscissa is None:
        abscissa = spectral_abscissa(G)
    if abs(abscissa) < SINGULAR_TOL:
        raise SingularOperator(f"spectral abscissa {abscissa:.3e} is numerically zero")
    x = linalg.solve(G.T, -_stack(L1, L2))
    P1, P2 = _unstack(x, m0, n)
    mins = [np.linalg.eigvalsh(P)[0] for P in list(P1) + list(P2)]
    if min(mins) <= 0:
        return Infeasible(f"Lyapunov solution not positive definite (min eigenvalue {min(mins):.3e})", abscissa)
    return P1, P2


def certify(dm: DecomposedModel, theta: StabilizerPair | None = None) -> StabilityCertificate | Infeasible:
    """Stability certificate for the closed loop ``u_k = Theta_k X_k``.

    Solves the Lyapunov equations with identity right-hand sides and reports
    the largest ``epsilon`` for which ``residual_k(i) <= -epsilon P_k(i)``.
    """
    G = second_moment_generator(dm, theta)
    a = spectral_abscissa(G)
    if a >= 0:
        return Infeasible(f"second-moment generator has abscissa {a:.6g} >= 0", a)
    I = np.eye(dm.n)
    res = solve_coupled_lyapunov(dm, theta, I, I, abscissa=a)
    if isinstance(res, Infeasible):
        return res
    P1, P2 = res
    r1, r2 = lyapunov_residual(dm, theta, P1, P2)
    eps = np.inf
    for R, P in ((r1, P1), (r2, P2)):
        for i in range(dm.m0):
            eps = min(eps, float(linalg.eigh(-R[i], P[i], eigvals_only=True)[0]))
    if not eps > 0:
        return Infeasible(f"nonpositive decay margin {eps:.3e}", a)
    return StabilityCertificate(P1, P2, eps, a)


def is_stabilizer(dm: DecomposedModel, theta: StabilizerPair | None = None) -> bool:
    try:
        return isinstance(certify(dm, theta), StabilityCertificate)
    except SingularOperator:
        return False
