"""Coupled Riccati equations: finite-horizon flow, infinite-horizon limit,
policy-iteration cross-check and feedback synthesis.

With ``P = (P_1, P_2)`` and ``k = 1, 2``::

    calR_k = R_k + D_k^T P_1 D_k
    calS_k = B_k^T P_k + D_k^T P_1 C_k + S_k
    calQ_k = P_k A_k + A_k^T P_k + C_k^T P_1 C_k + Q_k
    F_k(P) = Lambda[P_k] + calQ_k - calS_k^T calR_k^{-1} calS_k
    Theta_k = -calR_k^{-1} calS_k

The finite-horizon value with zero terminal weight solves ``dP/dtau = F(P)``
in time-to-go ``tau``; it increases with the horizon towards the stabilising
solution of ``F(P) = 0``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import GainSingular, NotStabilizable, NotStabilizing, Stalled, StepRejected
from .model import DecomposedModel
from .stability import (
    Infeasible,
    StabilityCertificate,
    StabilizerPair,
    certify,
    lyapunov_operator,
    solve_coupled_lyapunov,
)

log = logging.getLogger(__name__)

GAIN_MARGIN = 1e-10


def _t(X):
    return X.mT


def _sym(X):
    return 0.5 * (X + _t(X))


@dataclass(frozen=True)
class _Stacked:
    """Coefficients of both components stacked on a leading axis of length 2."""

    lam: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    Q: np.ndarray
    S: np.ndarray
    R: np.ndarray
    At: np.ndarray
    Bt: np.ndarray
    Ct: np.ndarray
    Dt: np.ndarray

    @classmethod
    def of(cls, dm: DecomposedModel) -> "_Stacked":
        st = {f: np.stack([getattr(dm.c1, f), getattr(dm.c2, f)]) for f in "ABCDQSR"}
        tr = {f + "t": np.ascontiguousarray(st[f].mT) for f in "ABCD"}
        return cls(dm.gen.lam, **st, **tr)


@dataclass(frozen=True)
class RiccatiParts:
    """Intermediate quantities of the Riccati map; arrays have shape (2, m0, ...)."""

    calQ: np.ndarray
    calS: np.ndarray
    calR: np.ndarray
    F: np.ndarray
    theta: np.ndarray
    min_gain_eig: float


def _parts(st: _Stacked, P: np.ndarray, check: bool = True) -> RiccatiParts:
    P1 = P[0][None]
    DtP1 = st.Dt @ P1
    calR = st.R + DtP1 @ st.D
    calR = 0.5 * (calR + calR.mT)
    calS = st.Bt @ P + DtP1 @ st.C + st.S
    PA = P @ st.A
    calQ = PA + PA.mT + st.Ct @ P1 @ st.C + st.Q
    if check:
        mg = float(np.linalg.eigvalsh(calR)[..., 0].min())
        if not mg > GAIN_MARGIN:
            raise GainSingular(f"R_k + D_k^T P_1 D_k lost definiteness (min eigenvalue {mg:.3e})")
    else:
        mg = float("nan")
    theta = -np.linalg.solve(calR, calS)
    gen = np.tensordot(st.lam, P, axes=(1, 1)).swapaxes(0, 1)
    F = gen + calQ + calS.mT @ theta
    F = 0.5 * (F + F.mT)
    return RiccatiParts(calQ, calS, calR, F, theta, mg)


def riccati_rhs(dm: DecomposedModel, P1, P2) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate ``(F_1(P), F_2(P))``, each of shape (m0, n, n).

    Raises
    ------
    GainSingular
        If some ``R_k + D_k^T P_1 D_k`` has smallest eigenvalue ``<= 1e-10``.
    """
    F = _parts(_Stacked.of(dm), np.stack([P1, P2])).F
    return F[0], F[1]


def riccati_parts(dm: DecomposedModel, P1, P2) -> RiccatiParts:
    return _parts(_Stacked.of(dm), np.stack([P1, P2]))


def synthesize_feedback(dm: DecomposedModel, P1, P2) -> StabilizerPair:
    """Gains ``Theta_k = -(R_k + D_k^T P_1 D_k)^{-1}(B_k^T P_k + D_k^T P_1 C_k + S_k)``."""
    th = riccati_parts(dm, P1, P2).theta
    return StabilizerPair(th[0], th[1])


@dataclass(frozen=True)
class RiccatiTrajectory:
    """Finite-horizon solution on a grid of calendar times ``t`` in ``[0, T]``.

    ``P1[j]`` and ``P2[j]`` hold the regime family at ``times[j]``; the last
    grid time is ``T`` where both vanish.
    """

    T: float
    times: np.ndarray
    P1: np.ndarray
    P2: np.ndarray


def _rk4_step(st: _Stacked, P: np.ndarray, h: float) -> np.ndarray:
    # definiteness is checked at the step start; the stage solves fail loudly otherwise
    k1 = _parts(st, P).F
    k2 = _parts(st, P + 0.5 * h * k1, check=False).F
    k3 = _parts(st, P + 0.5 * h * k2, check=False).F
    k4 = _parts(st, P + h * k3, check=False).F
    return _sym(P + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4))


def _safe_step(st: _Stacked, P: np.ndarray, h: float, min_step: float = 1e-9) -> tuple[np.ndarray, float]:
    """One RK4 step of size ``h``, halving on failure. Returns the new state and the step used."""
    while True:
        try:
            Pn = _rk4_step(st, P, h)
            if np.all(np.isfinite(Pn)):
                return Pn, h
        except (GainSingular, np.linalg.LinAlgError):
            pass
        h *= 0.5
        if h < min_step:
            raise StepRejected("Riccati integration failed even at the minimal step")


def _stiff_step(dm: DecomposedModel, st: _Stacked, P: np.ndarray, h_max: float) -> float:
    """Step from the spectral radius of the Riccati Jacobian at ``P``.

    The linearisation of ``F`` at ``P`` is the Lyapunov operator of the
    gains ``Theta(P)``, so its spectrum bounds the stable RK4 step.
    """
    th = _parts(st, P, check=False).theta
    J = lyapunov_operator(dm, StabilizerPair(th[0], th[1]))
    rho = float(np.max(np.abs(np.linalg.eigvals(J))))
    return h_max if rho == 0 else min(h_max, 0.8 / rho)


def integrate_finite_horizon(dm: DecomposedModel, T: float, step: float) -> RiccatiTrajectory:
    """Classical RK4 integration backward from ``P(T) = 0``.

    The grid is uniform with ``ceil(T / step)`` intervals; a step that fails
    (loss of definiteness or overflow) is retried with halved sub-steps.
    """
    if not T > 0 or not step > 0:
        raise ValueError("T and step must be positive")
    st = _Stacked.of(dm)
    nsteps = int(np.ceil(T / step - 1e-12))
    h = T / nsteps
    P = np.zeros((2, dm.m0, dm.n, dm.n))
    out = [P]
    for _ in range(nsteps):
        done = 0.0
        sub = h
        while done < h * (1 - 1e-12):
            P, used = _safe_step(st, P, min(sub, h - done))
            done += used
            sub = used
        out.append(P)
    arr = np.array(out[::-1])
    times = np.linspace(0.0, T, nsteps + 1)
    return RiccatiTrajectory(float(T), times, arr[:, 0], arr[:, 1])


def _advance(dm: DecomposedModel, st: _Stacked, P: np.ndarray, tau: float, target: float,
             step: float | None, h_max: float) -> tuple[np.ndarray, float]:
    """Integrate the time-to-go flow from ``tau`` to ``target``."""
    while tau < target * (1 - 1e-14):
        # re-estimate the stable step about once per unit of time-to-go
        h = step if step is not None else _stiff_step(dm, st, P, h_max)
        nsub = int(np.ceil(1.0 / h))
        for _ in range(nsub):
            hh = min(h, target - tau)
            if hh <= 0:
                break
            P, used = _safe_step(st, P, hh)
            tau += used
        if not np.all(np.abs(P) < 1e12):
            raise NotStabilizable("finite-horizon values diverge")
    return P, tau


def finite_horizon_values(dm: DecomposedModel, horizons, step: float | None = None, h_max: float = 0.2) -> np.ndarray:
    """``P~(0; T)`` for each horizon ``T``; shape (len(horizons), 2, m0, n, n).

    The Riccati flow is autonomous, so every horizon is read off one forward
    pass in time-to-go.
    """
    horizons = np.asarray(horizons, dtype=float)
    if np.any(horizons <= 0) or np.any(np.diff(horizons) <= 0):
        raise ValueError("horizons must be positive and increasing")
    st = _Stacked.of(dm)
    P = np.zeros((2, dm.m0, dm.n, dm.n))
    tau = 0.0
    out = []
    for Th in horizons:
        P, tau = _advance(dm, st, P, tau, Th, step, h_max)
        out.append(P.copy())
    return np.array(out)


@dataclass(frozen=True)
class AreSolution:
    """Stabilising solution of the coupled algebraic Riccati equations."""

    P1: np.ndarray
    P2: np.ndarray
    theta: StabilizerPair
    residual_norm: float
    certificate: StabilityCertificate
    method: str
    info: dict = field(default_factory=dict)

    def gain_matrices(self, dm: DecomposedModel) -> np.ndarray:
        """``R_k + D_k^T P_1 D_k`` stacked as (2, m0, m, m)."""
        return riccati_parts(dm, self.P1, self.P2).calR

    def to_dict(self) -> dict:
        return {
            "P1": self.P1.tolist(),
            "P2": self.P2.tolist(),
            "Theta1": self.theta.theta1.tolist(),
            "Theta2": self.theta.theta2.tolist(),
            "residual": self.residual_norm,
            "certificate": self.certificate.to_dict(),
            "method": self.method,
            "info": self.info,
        }


def _accept(dm: DecomposedModel, P: np.ndarray, tol: float, method: str, info: dict) -> AreSolution:
    parts = _parts(_Stacked.of(dm), P)
    res = float(np.max(np.linalg.norm(parts.F, axis=(-2, -1))))
    if not res < 10 * tol:
        raise NotStabilizable(f"Riccati residual {res:.3e} exceeds {10 * tol:.1e}")
    theta = StabilizerPair(parts.theta[0], parts.theta[1])
    cert = certify(dm, theta)
    if isinstance(cert, Infeasible):
        raise NotStabilizable(f"synthesized gains are not stabilizing: {cert.reason}")
    info = dict(info, min_gain_eigenvalue=parts.min_gain_eig)
    return AreSolution(P[0].copy(), P[1].copy(), theta, res, cert, method, info)


def solve_are(dm: DecomposedModel, tol: float = 1e-9, T0: float = 1.0, Tmax: float = 2.0**12,
              step: float | None = None, h_max: float = 0.2) -> AreSolution:
    """Stabilising ARE solution as the limit of finite-horizon values.

    Horizons ``T0, 2 T0, ...`` are visited until two consecutive values differ
    by less than ``tol`` (Frobenius norm, worst regime); the larger-horizon
    value is then checked for residual, gain definiteness and stability.
    Without an explicit ``step`` the RK4 step is ``min(h_max, 0.8 / rho)``
    with ``rho`` the spectral radius of the flow's Jacobian.

    Raises
    ------
    NotStabilizable
        No convergence by ``Tmax`` or a failed acceptance check.
    GainSingular
    """
    st = _Stacked.of(dm)
    P = np.zeros((2, dm.m0, dm.n, dm.n))
    tau = 0.0
    T = T0
    prev = None
    diffs = []
    while T <= Tmax * (1 + 1e-12):
        P, tau = _advance(dm, st, P, tau, T, step, h_max)
        if prev is not None:
            d = float(np.max(np.linalg.norm(P - prev, axis=(-2, -1))))
            diffs.append(d)
            if d < tol:
                rate = None
                if len(diffs) >= 3 and diffs[-2] > 0 and diffs[-3] > 0:
                    rate = float(np.log(diffs[-3] / diffs[-2]) / (T / 4))
                info = {"horizon": T, "doubling_differences": diffs, "observed_rate": rate}
                log.debug("ARE converged at horizon %g", T)
                return _accept(dm, P, tol, "horizon-limit", info)
        prev = P.copy()
        T *= 2
    raise NotStabilizable(f"finite-horizon values did not converge by horizon {Tmax:g}")


def newton_kleinman(dm: DecomposedModel, theta0: StabilizerPair | None = None, tol: float = 1e-10,
                    max_iter: int = 50) -> AreSolution:
    """Policy iteration from a stabilising initial gain.

    Each iteration solves the closed-loop coupled Lyapunov equation with
    weight ``Q_k + Theta^T S_k + S_k^T Theta + Theta^T R_k Theta`` and then
    updates ``Theta`` from the new ``P``. ``info['iterations']`` counts gain
    updates.

    Raises
    ------
    NotStabilizing
        ``theta0`` (or a later iterate) fails certification.
    Stalled
        ``max_iter`` reached.
    """
    theta = StabilizerPair.zeros(dm) if theta0 is None else theta0
    if isinstance(certify(dm, theta), Infeasible):
        raise NotStabilizing("initial gain is not a stabilizer")
    st = _Stacked.of(dm)
    Pprev = None
    steps = []
    for it in range(max_iter + 1):
        th = np.stack([theta.theta1, theta.theta2])
        L = st.Q + _t(th) @ st.S + _t(st.S) @ th + _t(th) @ st.R @ th
        res = solve_coupled_lyapunov(dm, theta, _sym(L[0]), _sym(L[1]))
        if isinstance(res, Infeasible):
            raise NotStabilizing(f"policy iterate {it} is not stabilizing: {res.reason}")
        P = np.stack(res)
        if Pprev is not None:
            d = float(np.max(np.linalg.norm(P - Pprev, axis=(-2, -1))))
            steps.append(d)
            if d < tol:
                return _accept(dm, P, max(tol, 1e-12), "policy-iteration", {"iterations": it, "step_norms": steps})
        parts = _parts(st, P)
        theta = StabilizerPair(parts.theta[0], parts.theta[1])
        Pprev = P
    raise Stalled(f"no convergence in {max_iter} policy iterations (last step {steps[-1]:.3e})")
