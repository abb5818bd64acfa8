"""Monte Carlo simulation of the decomposed closed-loop system and the
verification identities built on it.

Each path samples its chain trajectory exactly, then integrates

    dX2 = (A2 X2 + B2 u2 + b2) dt                                   (RK4)
    dX1 = (A1 X1 + B1 u1 + b1) dt
          + (C1 X1 + C2 X2 + D1 u1 + D2 u2 + sigma) dW              (Euler-Maruyama)

with ``u_k = Theta_k X_k + v_k (+ eps * delta_k)``. Uniform steps are split
at chain jumps and at input discontinuities, with the Brownian increment of
a split step drawn from the Brownian bridge. ``X2`` is the chain-conditional
mean of the state, so no nested simulation is needed to evaluate it.

Random numbers for path ``p`` come from their own stream seeded by
``(seed, p)`` and are drawn in a fixed order: chain path, ``W(s)``, one
bridge normal per split point, then one normal per uniform step.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .bsde import OffsetControls
from .chain import ChainPath, Generator, path_rng, sample_path, transition_matrix
from .errors import BlowUp
from .model import DecomposedModel, RegimeGrid
from .riccati import AreSolution, riccati_parts
from .stability import Infeasible, StabilizerPair, certify, closed_loop

log = logging.getLogger(__name__)

BLOWUP = 1e12


@dataclass(frozen=True)
class Perturbation:
    """Open-loop direction ``delta_2(t, alpha)`` and ``delta_1 = coef(t, alpha) W(t)``."""

    v2: RegimeGrid
    v1_coef: RegimeGrid

    @classmethod
    def zeros(cls, m0: int, m: int) -> "Perturbation":
        z = RegimeGrid.zeros(m0, m)
        return cls(z, z)

    @property
    def is_zero(self) -> bool:
        return self.v2.is_zero and self.v1_coef.is_zero


@dataclass(frozen=True)
class ControlLaw:
    """``u_k = Theta_k X_k + v_k + eps * delta_k``."""

    theta: StabilizerPair
    offsets: OffsetControls
    perturbation: Perturbation | None = None
    eps: float = 0.0

    @classmethod
    def feedback(cls, dm: DecomposedModel, theta: StabilizerPair) -> "ControlLaw":
        return cls(theta, OffsetControls.zeros(dm.m0, dm.m))

    def with_perturbation(self, pert: Perturbation, eps: float) -> "ControlLaw":
        return replace(self, perturbation=pert, eps=float(eps))


@dataclass(frozen=True)
class SimConfig:
    """Monte Carlo settings.

    ``T_sim=None`` selects ``s + max(20 / rho, 2 T_in)`` with ``rho`` minus the
    closed-loop spectral abscissa. Moments are recorded every
    ``record_dt`` (rounded to a multiple of ``dt``).
    """

    dt: float = 1e-3
    N: int = 10_000
    seed: int = 0
    s: float = 0.0
    iota: int = 0
    xi2: tuple = (1.0,)
    xi1_coef: tuple = (0.0,)
    T_sim: float | None = None
    record_dt: float | None = None
    threads: int = 1
    chunk: int = 512

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.N < 1:
            raise ValueError("N must be at least 1")
        if self.T_sim is not None and not self.T_sim > self.s:
            raise ValueError("T_sim must exceed s")


def default_horizon(dm: DecomposedModel, theta: StabilizerPair, s: float, extra_support: float = 0.0) -> float:
    cert = certify(dm, theta)
    if isinstance(cert, Infeasible):
        raise BlowUp(f"closed loop is not mean-square stable: {cert.reason}")
    rho = -cert.abscissa
    return s + max(20.0 / rho, 2.0 * max(dm.T_in, extra_support), 1e-9)


# -- forcing tables -----------------------------------------------------------------


def _channels(n: int, m: int) -> dict[str, slice]:
    names = [("e2", n), ("e1w", n), ("f0", n), ("fw", n), ("o2", m), ("o1w", m), ("q2", n), ("q1w", n), ("r2", m), ("r1w", m)]
    out, o = {}, 0
    for name, d in names:
        out[name] = slice(o, o + d)
        o += d
    return out


def _support_nodes(grids) -> tuple[np.ndarray, list[float]]:
    pts, ends = [np.zeros(1)], []
    for gr in grids:
        if gr.is_zero:
            continue
        pts.append(gr.times)
        pts.append([gr.support_end])
        ends.append(gr.support_end)
    return np.unique(np.concatenate([np.asarray(p, float) for p in pts])), ends


def forcing_table(dm: DecomposedModel, laws: list[ControlLaw]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Tabulate every time-dependent coefficient on one node grid.

    Returns ``(nodes, table, jumps)`` where ``table`` has shape
    (K, L, m0, channels) and ``jumps`` lists the discontinuity times. All
    channels are piecewise linear between nodes and vanish after the last one.
    """
    n, m, m0 = dm.n, dm.m, dm.m0
    ch = _channels(n, m)
    c1, c2 = dm.c1, dm.c2
    inputs = [c1.b.h, c1.sigma.h, c1.q.h, c1.r.h, c2.b.g, c2.sigma.g, c2.q.g, c2.r.g]
    law_grids = []
    for law in laws:
        law_grids += [law.offsets.v2, law.offsets.v1_coef]
        if law.perturbation is not None and law.eps != 0:
            law_grids += [law.perturbation.v2, law.perturbation.v1_coef]
    nodes, ends = _support_nodes(inputs + law_grids)
    if not any(not g.is_zero for g in inputs + law_grids):
        return np.zeros(1), np.zeros((len(laws), 1, m0, 6 * n + 4 * m)), np.zeros(0)
    extra = [np.nextafter(e, np.inf) for e in ends if e < nodes[-1]]
    nodes = np.unique(np.concatenate([nodes, extra]))
    tt = nodes[:, None]
    rr = np.arange(m0)[None, :]
    hb, hs, hq, hr = (g(tt, rr) for g in inputs[:4])
    gb, gs, gq, gr = (g(tt, rr) for g in inputs[4:])
    mv = lambda M, v: np.einsum("rij,lrj->lri", M, v)
    table = np.zeros((len(laws), nodes.size, m0, 6 * n + 4 * m))
    for k, law in enumerate(laws):
        o2 = law.offsets.v2(tt, rr)
        o1 = law.offsets.v1_coef(tt, rr)
        if law.perturbation is not None and law.eps != 0:
            o2 = o2 + law.eps * law.perturbation.v2(tt, rr)
            o1 = o1 + law.eps * law.perturbation.v1_coef(tt, rr)
        T = table[k]
        T[..., ch["e2"]] = mv(c2.B, o2) + gb
        T[..., ch["e1w"]] = mv(c1.B, o1) + hb
        T[..., ch["f0"]] = mv(c2.D, o2) + gs
        T[..., ch["fw"]] = mv(c1.D, o1) + hs
        T[..., ch["o2"]] = o2
        T[..., ch["o1w"]] = o1
        T[..., ch["q2"]] = gq
        T[..., ch["q1w"]] = hq
        T[..., ch["r2"]] = gr
        T[..., ch["r1w"]] = hr
    return nodes, table, np.array(sorted(set(ends)))


# -- compiled kernel ---------------------------------------------------------------


@njit(cache=True, nogil=True, inline="always")
def _interp(tn, tab, k, reg, t, out):
    L = tn.shape[0]
    C = out.shape[0]
    if t > tn[L - 1]:
        for c in range(C):
            out[c] = 0.0
        return
    if t <= tn[0] or L == 1:
        for c in range(C):
            out[c] = tab[k, 0, reg, c]
        return
    lo, hi = 0, L - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if tn[mid] <= t:
            lo = mid
        else:
            hi = mid
    w = (t - tn[lo]) / (tn[hi] - tn[lo])
    for c in range(C):
        out[c] = (1.0 - w) * tab[k, lo, reg, c] + w * tab[k, hi, reg, c]


@njit(cache=True, nogil=True, inline="always")
def _matvec(M, x, out):
    for i in range(M.shape[0]):
        acc = 0.0
        for j in range(M.shape[1]):
            acc += M[i, j] * x[j]
        out[i] = acc


@njit(cache=True, nogil=True, inline="always")
def _integrand(k, reg, x1, x2, w, F, T1, T2, Q1, S1, R1, Q2, S2, R2, n, m, u1, u2, tmp_n, tmp_m):
    # offsets of the channel layout in forcing_table
    o_o2 = 4 * n
    o_o1 = 4 * n + m
    o_q2 = 4 * n + 2 * m
    o_q1 = 5 * n + 2 * m
    o_r2 = 6 * n + 2 * m
    o_r1 = 6 * n + 3 * m
    _matvec(T1[k, reg], x1, u1)
    _matvec(T2[k, reg], x2, u2)
    for a in range(m):
        u1[a] += F[o_o1 + a] * w
        u2[a] += F[o_o2 + a]
    c = 0.0
    _matvec(Q1[reg], x1, tmp_n)
    for i in range(n):
        c += tmp_n[i] * x1[i] + 2.0 * F[o_q1 + i] * w * x1[i]
    _matvec(S1[reg], x1, tmp_m)
    for a in range(m):
        c += 2.0 * tmp_m[a] * u1[a] + 2.0 * F[o_r1 + a] * w * u1[a]
    _matvec(R1[reg], u1, tmp_m)
    for a in range(m):
        c += tmp_m[a] * u1[a]
    _matvec(Q2[reg], x2, tmp_n)
    for i in range(n):
        c += tmp_n[i] * x2[i] + 2.0 * F[o_q2 + i] * x2[i]
    _matvec(S2[reg], x2, tmp_m)
    for a in range(m):
        c += 2.0 * tmp_m[a] * u2[a] + 2.0 * F[o_r2 + a] * u2[a]
    _matvec(R2[reg], u2, tmp_m)
    for a in range(m):
        c += tmp_m[a] * u2[a]
    return c


@njit(cache=True, nogil=True)
def _kernel(ev_t, ev_reg, bridge, W0, Z, reg0, s, dt, nsteps,
            A1, A2, C1, C2, T1, T2, Q1, S1, R1, Q2, S2, R2,
            tn, tab, x1c, x2init, rec_every,
            cost, X1T, X2T, mom, nrm, nd, dX1, dX2, dU1, dU2, dReg, dW, blow):
    K = A1.shape[0]
    n = A1.shape[2]
    m = T1.shape[2]
    Np = ev_t.shape[0]
    J = ev_t.shape[1]
    C = tab.shape[3]
    x1 = np.zeros((K, n))
    x2 = np.zeros((K, n))
    F0 = np.zeros(C)
    Fm = np.zeros(C)
    F1 = np.zeros(C)
    k1 = np.zeros(n)
    k2 = np.zeros(n)
    k3 = np.zeros(n)
    k4 = np.zeros(n)
    y = np.zeros(n)
    d1 = np.zeros(n)
    d2 = np.zeros(n)
    u1 = np.zeros(m)
    u2 = np.zeros(m)
    tmp_n = np.zeros(n)
    tmp_m = np.zeros(m)
    nx1 = np.zeros(n)
    last_t = tn[tn.shape[0] - 1]
    has_tab = tn.shape[0] > 1
    for p in range(Np):
        reg = reg0[p]
        w = W0[p]
        for k in range(K):
            for i in range(n):
                x1[k, i] = x1c[i] * w
                x2[k, i] = x2init[i]
            cost[k, p] = 0.0
        e = 0
        r = 0
        # record at the start time
        for k in range(K):
            for i in range(n):
                xa = x1[k, i] + x2[k, i]
                mom[k, r, 0, i] += x1[k, i]
                mom[k, r, 1, i] += x1[k, i] * x1[k, i]
                mom[k, r, 2, i] += x2[k, i]
                mom[k, r, 3, i] += x2[k, i] * x2[k, i]
                mom[k, r, 4, i] += xa
                mom[k, r, 5, i] += xa * xa
            q = 0.0
            for i in range(n):
                q += (x1[k, i] + x2[k, i]) ** 2
            nrm[k, r, 0] += q
            nrm[k, r, 1] += q * q
        if p < nd:
            dReg[p, r] = reg
            dW[p, r] = w
            for k in range(K):
                if has_tab and s <= last_t:
                    _interp(tn, tab, k, reg, np.nextafter(s, np.inf), F1)
                else:
                    for c in range(C):
                        F1[c] = 0.0
                _integrand(k, reg, x1[k], x2[k], w, F1, T1, T2, Q1, S1, R1, Q2, S2, R2, n, m, u1, u2, tmp_n, tmp_m)
                for i in range(n):
                    dX1[p, k, r, i] = x1[k, i]
                    dX2[p, k, r, i] = x2[k, i]
                for a in range(m):
                    dU1[p, k, r, a] = u1[a]
                    dU2[p, k, r, a] = u2[a]
        r += 1
        tcur = s
        failed = False
        for j in range(nsteps):
            tend = s + (j + 1) * dt
            Lrem = tend - tcur
            rem = Z[p, j] * np.sqrt(Lrem)
            done = False
            while not done:
                # next split point inside the step, if any
                if e < J and ev_t[p, e] <= tend:
                    tau = ev_t[p, e]
                    h = tau - tcur
                    if h > 0 and Lrem - h > 0:
                        dWs = (h / Lrem) * rem + np.sqrt(h * (Lrem - h) / Lrem) * bridge[p, e]
                    elif h > 0:
                        dWs = rem
                    else:
                        dWs = 0.0
                else:
                    tau = tend
                    h = Lrem
                    dWs = rem
                    done = True
                if h > 0:
                    t0 = tcur
                    use_tab = has_tab and t0 <= last_t
                    for k in range(K):
                        if use_tab:
                            _interp(tn, tab, k, reg, np.nextafter(t0, np.inf), F0)
                            _interp(tn, tab, k, reg, t0 + 0.5 * h, Fm)
                            _interp(tn, tab, k, reg, t0 + h, F1)
                        else:
                            for c in range(C):
                                F0[c] = 0.0
                                Fm[c] = 0.0
                                F1[c] = 0.0
                        c0 = _integrand(k, reg, x1[k], x2[k], w, F0, T1, T2, Q1, S1, R1, Q2, S2, R2, n, m, u1, u2, tmp_n, tmp_m)
                        # X2: RK4
                        Ak = A2[k, reg]
                        _matvec(Ak, x2[k], k1)
                        for i in range(n):
                            k1[i] += F0[i]
                            y[i] = x2[k, i] + 0.5 * h * k1[i]
                        _matvec(Ak, y, k2)
                        for i in range(n):
                            k2[i] += Fm[i]
                            y[i] = x2[k, i] + 0.5 * h * k2[i]
                        _matvec(Ak, y, k3)
                        for i in range(n):
                            k3[i] += Fm[i]
                            y[i] = x2[k, i] + h * k3[i]
                        _matvec(Ak, y, k4)
                        for i in range(n):
                            k4[i] += F1[i]
                        # X1: Euler-Maruyama with start-of-step coefficients
                        _matvec(A1[k, reg], x1[k], d1)
                        _matvec(C1[k, reg], x1[k], d2)
                        _matvec(C2[k, reg], x2[k], tmp_n)
                        for i in range(n):
                            drift = d1[i] + F0[n + i] * w
                            diff = d2[i] + tmp_n[i] + F0[3 * n + i] * w + F0[2 * n + i]
                            nx1[i] = x1[k, i] + h * drift + diff * dWs
                        for i in range(n):
                            x2[k, i] += (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
                            x1[k, i] = nx1[i]
                        c1v = _integrand(k, reg, x1[k], x2[k], w + dWs, F1, T1, T2, Q1, S1, R1, Q2, S2, R2, n, m, u1, u2, tmp_n, tmp_m)
                        cost[k, p] += 0.25 * h * (c0 + c1v)
                    w += dWs
                    rem -= dWs
                    Lrem -= h
                    tcur = tau
                if not done:
                    reg = ev_reg[p, e]
                    e += 1
            tcur = tend
            if (j + 1) % 64 == 0 or j == nsteps - 1:
                for k in range(K):
                    for i in range(n):
                        v1 = abs(x1[k, i])
                        v2 = abs(x2[k, i])
                        if not (v1 < 1e12 and v2 < 1e12):
                            failed = True
                if failed:
                    blow[p] = 1
                    break
            if (j + 1) % rec_every == 0 and r < mom.shape[1]:
                for k in range(K):
                    q = 0.0
                    for i in range(n):
                        xa = x1[k, i] + x2[k, i]
                        mom[k, r, 0, i] += x1[k, i]
                        mom[k, r, 1, i] += x1[k, i] * x1[k, i]
                        mom[k, r, 2, i] += x2[k, i]
                        mom[k, r, 3, i] += x2[k, i] * x2[k, i]
                        mom[k, r, 4, i] += xa
                        mom[k, r, 5, i] += xa * xa
                        q += xa * xa
                    nrm[k, r, 0] += q
                    nrm[k, r, 1] += q * q
                if p < nd:
                    dReg[p, r] = reg
                    dW[p, r] = w
                    for k in range(K):
                        if has_tab and tcur <= last_t:
                            _interp(tn, tab, k, reg, tcur, F1)
                        else:
                            for c in range(C):
                                F1[c] = 0.0
                        _integrand(k, reg, x1[k], x2[k], w, F1, T1, T2, Q1, S1, R1, Q2, S2, R2, n, m, u1, u2, tmp_n, tmp_m)
                        for i in range(n):
                            dX1[p, k, r, i] = x1[k, i]
                            dX2[p, k, r, i] = x2[k, i]
                        for a in range(m):
                            dU1[p, k, r, a] = u1[a]
                            dU2[p, k, r, a] = u2[a]
                r += 1
        for k in range(K):
            for i in range(n):
                X1T[k, p, i] = x1[k, i]
                X2T[k, p, i] = x2[k, i]


# -- batch driver --------------------------------------------------------------------


@dataclass
class PathBatch:
    """Output of :func:`simulate_paths`; leading axis ``K`` indexes the laws.

    ``mom[k, r]`` stacks sums over paths of ``X1, X1**2, X2, X2**2, X, X**2``
    at ``record_times[r]`` and ``nrm[k, r]`` the sums of ``|X|^2`` and
    ``|X|^4``. Dumped paths keep full records.
    """

    s: float
    T_end: float
    dt: float
    N: int
    cost: np.ndarray
    X1T: np.ndarray
    X2T: np.ndarray
    record_times: np.ndarray
    mom: np.ndarray
    nrm: np.ndarray
    dumps: dict = field(default_factory=dict)

    def moment(self, k: int = 0) -> dict[str, np.ndarray]:
        """Per-record sample means and standard errors of the states."""
        N = self.N
        names = ("X1", "X2", "X")
        out = {}
        for j, name in enumerate(names):
            s1 = self.mom[k, :, 2 * j]
            s2 = self.mom[k, :, 2 * j + 1]
            mean = s1 / N
            var = np.maximum(s2 / N - mean**2, 0.0) * N / max(N - 1, 1)
            out[name] = mean
            out[name + "_se"] = np.sqrt(var / N)
        s1, s2 = self.nrm[k, :, 0], self.nrm[k, :, 1]
        mean = s1 / N
        out["norm2"] = mean
        out["norm2_se"] = np.sqrt(np.maximum(s2 / N - mean**2, 0.0) / max(N - 1, 1))
        return out


def _events_for_path(path: ChainPath, jumps: np.ndarray, T_end: float):
    """Merge chain jumps with input discontinuities inside ``(s, T_end]``."""
    s = path.start_time
    dis = jumps[(jumps > s) & (jumps < T_end)]
    t = np.concatenate([path.jump_times, dis])
    is_jump = np.concatenate([np.ones(path.n_jumps, bool), np.zeros(dis.size, bool)])
    order = np.argsort(t, kind="stable")
    t, is_jump = t[order], is_jump[order]
    regs = np.empty(t.size, np.int64)
    cur = path.regimes[0]
    jk = 1
    for i in range(t.size):
        if is_jump[i]:
            cur = path.regimes[jk]
            jk += 1
        regs[i] = cur
    return t, regs


def _draw_chunk(gen: Generator, cfg: SimConfig, T_end: float, idx: np.ndarray, nsteps: int,
                jumps: np.ndarray, fixed_path: ChainPath | None):
    n_p = idx.size
    evs, regs, brs = [], [], []
    W0 = np.empty(n_p)
    Z = np.empty((n_p, nsteps))
    reg0 = np.empty(n_p, np.int64)
    for a, p in enumerate(idx):
        rng = path_rng(cfg.seed, p)
        path = fixed_path if fixed_path is not None else sample_path(gen, cfg.s, cfg.iota, T_end, rng)
        et, er = _events_for_path(path, jumps, T_end)
        W0[a] = np.sqrt(cfg.s) * rng.standard_normal()
        brs.append(rng.standard_normal(et.size))
        Z[a] = rng.standard_normal(nsteps)
        evs.append(et)
        regs.append(er)
        reg0[a] = path.regimes[0]
    J = max(1, max(e.size for e in evs))
    ev_t = np.full((n_p, J), np.inf)
    ev_r = np.zeros((n_p, J), np.int64)
    br = np.zeros((n_p, J))
    for a in range(n_p):
        k = evs[a].size
        ev_t[a, :k] = evs[a]
        ev_r[a, :k] = regs[a]
        br[a, :k] = brs[a]
    return ev_t, ev_r, br, W0, Z, reg0


def simulate_paths(dm: DecomposedModel, laws, cfg: SimConfig, *, fixed_path: ChainPath | None = None,
                   n_dump: int = 0, T_end: float | None = None) -> PathBatch:
    """Simulate ``cfg.N`` paths under one or more control laws.

    All laws share the same random numbers (common random numbers), so
    differences between laws have low variance.

    Raises
    ------
    BlowUp
        Some state exceeded ``1e12`` in absolute value.
    """
    if isinstance(laws, ControlLaw):
        laws = [laws]
    n, m = dm.n, dm.m
    K = len(laws)
    if T_end is None:
        T_end = cfg.T_sim
    if T_end is None:
        extra = max((lw.perturbation.v2.support_end for lw in laws if lw.perturbation is not None), default=0.0)
        T_end = default_horizon(dm, laws[0].theta, cfg.s, extra)
    if not T_end > cfg.s:
        raise ValueError("simulation horizon must exceed the start time")
    if fixed_path is not None and (fixed_path.start_time != cfg.s or fixed_path.end_time < T_end):
        raise ValueError("fixed chain path must start at s and cover the horizon")
    nsteps = int(np.ceil((T_end - cfg.s) / cfg.dt - 1e-9))
    dt = (T_end - cfg.s) / nsteps
    rec_dt = cfg.record_dt if cfg.record_dt is not None else max(dt, (T_end - cfg.s) / 200)
    rec_every = max(1, int(round(rec_dt / dt)))
    R = 1 + nsteps // rec_every
    record_times = cfg.s + dt * rec_every * np.arange(R)

    mats = {}
    for k in (1, 2):
        A = np.stack([closed_loop(dm, lw.theta, k)[0] for lw in laws])
        Cm = np.stack([closed_loop(dm, lw.theta, k)[1] for lw in laws])
        mats[f"A{k}"], mats[f"C{k}"] = A, Cm
        mats[f"T{k}"] = np.stack([lw.theta[k] for lw in laws])
    c1, c2 = dm.c1, dm.c2
    tn, tab, jumps = forcing_table(dm, laws)
    x1c = np.asarray(cfg.xi1_coef, float).reshape(-1)
    x2 = np.asarray(cfg.xi2, float).reshape(-1)
    if x1c.size == 1 and n > 1:
        x1c = np.full(n, x1c[0]) if x1c[0] != 0 else np.zeros(n)
    if x1c.size != n or x2.size != n:
        raise ValueError(f"initial states must have dimension {n}")
    nd = min(n_dump, cfg.N)

    chunks = [np.arange(a, min(a + cfg.chunk, cfg.N)) for a in range(0, cfg.N, cfg.chunk)]
    f64 = lambda a: np.ascontiguousarray(a, dtype=np.float64)
    consts = [f64(mats["A1"]), f64(mats["A2"]), f64(mats["C1"]), f64(mats["C2"]), f64(mats["T1"]), f64(mats["T2"]),
              f64(c1.Q), f64(c1.S), f64(c1.R), f64(c2.Q), f64(c2.S), f64(c2.R), f64(tn), f64(tab), f64(x1c), f64(x2)]

    def run(idx):
        ev_t, ev_r, br, W0, Z, reg0 = _draw_chunk(dm.gen, cfg, T_end, idx, nsteps, jumps, fixed_path)
        n_p = idx.size
        cost = np.zeros((K, n_p))
        X1T = np.zeros((K, n_p, n))
        X2T = np.zeros((K, n_p, n))
        mom = np.zeros((K, R, 6, n))
        nrm = np.zeros((K, R, 2))
        ndl = max(0, min(nd - idx[0], n_p))
        dX1 = np.zeros((ndl, K, R, n))
        dX2 = np.zeros((ndl, K, R, n))
        dU1 = np.zeros((ndl, K, R, m))
        dU2 = np.zeros((ndl, K, R, m))
        dReg = np.zeros((ndl, R), np.int64)
        dW = np.zeros((ndl, R))
        blow = np.zeros(n_p, np.int64)
        _kernel(ev_t, ev_r, br, W0, Z, reg0, float(cfg.s), float(dt), int(nsteps), *consts[:12],
                consts[12], consts[13], consts[14], consts[15], int(rec_every),
                cost, X1T, X2T, mom, nrm, ndl, dX1, dX2, dU1, dU2, dReg, dW, blow)
        return cost, X1T, X2T, mom, nrm, (dX1, dX2, dU1, dU2, dReg, dW), blow

    if cfg.threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as ex:
            results = list(ex.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    if any(r[6].any() for r in results):
        raise BlowUp("state exceeded 1e12; the closed loop is unstable or dt is too large")
    cost = np.concatenate([r[0] for r in results], axis=1)
    X1T = np.concatenate([r[1] for r in results], axis=1)
    X2T = np.concatenate([r[2] for r in results], axis=1)
    mom = sum(r[3] for r in results)
    nrm = sum(r[4] for r in results)
    dumps = {}
    if nd:
        parts = [r[5] for r in results if r[5][0].shape[0]]
        keys = ("X1", "X2", "u1", "u2", "regime", "W")
        dumps = {key: np.concatenate([p[i] for p in parts]) for i, key in enumerate(keys)}
    return PathBatch(cfg.s, float(T_end), dt, cfg.N, cost, X1T, X2T, record_times, mom, nrm, dumps)


def path_table(batch: PathBatch, law_index: int = 0) -> tuple[list[str], list[list]]:
    """Dumped paths as rows ``path, t, regime, X1_*, X2_*, u1_*, u2_*``."""
    d = batch.dumps
    if not d:
        return [], []
    nd, _, R, n = d["X1"].shape
    m = d["u1"].shape[-1]
    header = (["path", "t", "regime"] + [f"X1_{i}" for i in range(n)] + [f"X2_{i}" for i in range(n)]
              + [f"u1_{a}" for a in range(m)] + [f"u2_{a}" for a in range(m)])
    rows = []
    for p in range(nd):
        for r in range(R):
            rows.append([p, float(batch.record_times[r]), int(d["regime"][p, r])]
                        + d["X1"][p, law_index, r].tolist() + d["X2"][p, law_index, r].tolist()
                        + d["u1"][p, law_index, r].tolist() + d["u2"][p, law_index, r].tolist())
    return header, rows


def dump_csv(batch: PathBatch, path, law_index: int = 0) -> None:
    """Write :func:`path_table` to ``path``."""
    import csv

    header, rows = path_table(batch, law_index)
    if not rows:
        raise ValueError("batch has no dumped paths")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in row])


# -- estimators ----------------------------------------------------------------------


@dataclass(frozen=True)
class CostEstimate:
    mean: float
    stderr: float
    tail_bound: float
    N: int
    T_sim: float

    def to_dict(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "tail_bound": self.tail_bound, "N": self.N, "T_sim": self.T_sim}


def mean_stderr(x: np.ndarray) -> tuple[float, float]:
    x = np.asarray(x, float)
    if x.size < 2:
        return float(x.mean()), 0.0
    return float(x.mean()), float(x.std(ddof=1) / np.sqrt(x.size))


def tail_bound(dm: DecomposedModel, law: ControlLaw, batch: PathBatch, k: int = 0) -> float:
    """Bound on the cost accrued after the horizon.

    With the certificate ``(P1, P2, eps)`` of the feedback gains,
    ``E V(t) <= exp(-eps (t - T)) E V(T)`` for ``V = sum_k <P_k X_k, X_k>``
    once the inputs have switched off, so the remaining cost is at most
    ``c / (2 eps lambda_min(P)) * E V(T)`` where ``c`` bounds the running
    cost's quadratic form. Infinite when inputs are still active at ``T``.
    """
    cert = certify(dm, law.theta)
    if isinstance(cert, Infeasible):
        return float("inf")
    active = dm.T_in
    if law.perturbation is not None and law.eps != 0:
        active = max(active, law.perturbation.v2.support_end, law.perturbation.v1_coef.support_end)
    if not (law.offsets.v2.is_zero and law.offsets.v1_coef.is_zero):
        active = max(active, law.offsets.v2.support_end)
    if batch.T_end < active:
        return float("inf")
    lmin = min(np.linalg.eigvalsh(cert.P1)[:, 0].min(), np.linalg.eigvalsh(cert.P2)[:, 0].min())
    cmax = 0.0
    for kk, c in ((1, dm.c1), (2, dm.c2)):
        th = law.theta[kk]
        M = c.Q + th.mT @ c.S + c.S.mT @ th + th.mT @ c.R @ th
        cmax = max(cmax, float(np.abs(np.linalg.eigvalsh(0.5 * (M + M.mT))).max()))
    rid = batch.X1T[k]
    # regimes at T are not stored, so bound V with the largest P over regimes
    pmax = max(np.linalg.eigvalsh(cert.P1)[:, -1].max(), np.linalg.eigvalsh(cert.P2)[:, -1].max())
    EV = pmax * float(np.mean(np.sum(rid**2, axis=1) + np.sum(batch.X2T[k] ** 2, axis=1)))
    return 0.5 * cmax * EV / (cert.epsilon * lmin)


def estimate_cost(dm: DecomposedModel, law: ControlLaw, cfg: SimConfig, *, fixed_path=None) -> CostEstimate:
    """Monte Carlo cost with standard error and truncation tail bound."""
    batch = simulate_paths(dm, law, cfg, fixed_path=fixed_path)
    mean, se = mean_stderr(batch.cost[0])
    return CostEstimate(mean, se, tail_bound(dm, law, batch), cfg.N, batch.T_end)


# -- optimality checks ----------------------------------------------------------------


def random_directions(dm: DecomposedModel, count: int, seed: int = 0, support: float = 1.0,
                      n_nodes: int = 3) -> list[Perturbation]:
    """Random piecewise-linear perturbation directions supported on ``[0, support]``."""
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, support, n_nodes)
    out = []
    for _ in range(count):
        v2 = rng.standard_normal((dm.m0, n_nodes, dm.m))
        v1 = rng.standard_normal((dm.m0, n_nodes, dm.m))
        out.append(Perturbation(RegimeGrid(t, v2, support), RegimeGrid(t, v1, support)))
    return out


def constant_direction(dm: DecomposedModel, support: float = 1.0, component: int = 2) -> Perturbation:
    """``delta_k = 1`` on ``[0, support]`` for the chosen component, zero otherwise."""
    one = RegimeGrid(np.array([0.0]), np.ones((dm.m0, 1, dm.m)), support)
    z = RegimeGrid.zeros(dm.m0, dm.m)
    return Perturbation(one, z) if component == 2 else Perturbation(z, one)


def expected_curvature(dm: DecomposedModel, are: AreSolution, pert: Perturbation, s: float, iota: int,
                       n_grid: int = 400) -> float:
    """Second derivative ``E int <calR_k delta_k, delta_k> dt`` of the cost along ``pert``."""
    calR = are.gain_matrices(dm)
    end = max(pert.v2.support_end, pert.v1_coef.support_end)
    if end <= s:
        return 0.0
    t = np.linspace(s, end, n_grid + 1)
    regs = np.arange(dm.m0)
    d2 = pert.v2(t[:, None], regs[None])
    d1 = pert.v1_coef(t[:, None], regs[None])
    f = (np.einsum("tra,rab,trb->tr", d2, calR[1], d2)
         + t[:, None] * np.einsum("tra,rab,trb->tr", d1, calR[0], d1))
    P = transition_matrix(dm.gen, t[1] - t[0])
    row = np.zeros(dm.m0)
    row[iota] = 1.0
    g = np.empty(t.size)
    for j in range(t.size):
        g[j] = row @ f[j]
        row = row @ P
    return float(np.sum(0.5 * (g[1:] + g[:-1]) * np.diff(t)))


@dataclass
class DirectionResult:
    derivative: float
    stderr: float
    z: float
    derivative_2eps: float
    curvature: float
    curvature_expected: float | None
    passed: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class StationarityReport:
    eps: float
    base_cost: float
    base_stderr: float
    directions: list[DirectionResult]

    @property
    def passed(self) -> bool:
        return all(d.passed for d in self.directions)

    def to_dict(self) -> dict:
        return {"eps": self.eps, "base_cost": self.base_cost, "base_stderr": self.base_stderr,
                "passed": self.passed, "directions": [d.to_dict() for d in self.directions]}


def stationarity_check(dm: DecomposedModel, base: ControlLaw, cfg: SimConfig, directions: list[Perturbation],
                       eps: float = 0.1, are: AreSolution | None = None, z_max: float = 3.0,
                       atol: float | None = None) -> StationarityReport:
    """Central differences of the cost at ``base`` along each direction.

    All ``1 + 4 * len(directions)`` laws (``0, +-eps, +-2 eps``) share common
    random numbers. A direction passes when
    ``|derivative| < z_max * stderr + atol`` and the second difference is
    positive. ``atol`` absorbs the first-order time-discretization bias,
    which is all that remains when a direction does not touch the noise;
    it defaults to ``dt * max(1, curvature)``. A zero direction has
    derivative exactly zero and passes.
    """
    laws = [base]
    for d in directions:
        for e in (eps, -eps, 2 * eps, -2 * eps):
            laws.append(base.with_perturbation(d, e))
    batch = simulate_paths(dm, laws, cfg)
    J = batch.cost
    m0, se0 = mean_stderr(J[0])
    out = []
    for i, d in enumerate(directions):
        jp, jm, jp2, jm2 = J[1 + 4 * i: 5 + 4 * i]
        dpath = (jp - jm) / (2 * eps)
        der, se = mean_stderr(dpath)
        der2, _ = mean_stderr((jp2 - jm2) / (4 * eps))
        curv, _ = mean_stderr((jp - 2 * J[0] + jm) / eps**2)
        expc = expected_curvature(dm, are, d, cfg.s, cfg.iota) if are is not None else None
        if se == 0.0:
            z = 0.0 if abs(der) < 1e-12 else float("inf")
        else:
            z = der / se
        tol = atol if atol is not None else batch.dt * max(1.0, abs(curv))
        ok = d.is_zero or (abs(der) < z_max * se + tol and curv > 0)
        out.append(DirectionResult(der, se, z, der2, curv, expc, bool(ok)))
    return StationarityReport(eps, m0, se0, out)


@dataclass
class MartingaleReport:
    times: np.ndarray
    z: np.ndarray
    max_abs_z: float
    threshold: float

    @property
    def passed(self) -> bool:
        return bool(self.max_abs_z < self.threshold)

    def to_dict(self) -> dict:
        return {"times": self.times.tolist(), "z": self.z.tolist(), "max_abs_z": self.max_abs_z,
                "threshold": self.threshold, "passed": self.passed}


def occupation_times(paths: list[ChainPath], times: np.ndarray, m0: int) -> np.ndarray:
    """Occupation of each regime on ``[s, t]`` for every path and time; shape (N, T, m0)."""
    out = np.zeros((len(paths), times.size, m0))
    for a, p in enumerate(paths):
        edges = np.concatenate([[p.start_time], p.jump_times, [np.inf]])
        lo = np.minimum(edges[:-1][None, :], times[:, None])
        hi = np.minimum(edges[1:][None, :], times[:, None])
        seg = hi - lo
        for r in range(m0):
            out[a, :, r] = seg[:, p.regimes == r].sum(axis=1)
    return out


def martingale_check(dm: DecomposedModel, are: AreSolution, cfg: SimConfig, P1=None, P2=None,
                     buckets: int = 10, horizon: float = 5.0, threshold: float = 3.0) -> MartingaleReport:
    """z-scores of ``P_k(alpha(t)) + int_s^t G_k(alpha) dr`` against its start value.

    ``G_k = calQ_k - calS_k^T calR_k^{-1} calS_k`` is evaluated at ``(P1, P2)``
    (default: the ARE solution). At the ARE solution the process is a
    martingale; a wrong ``P`` produces a drift.
    """
    P1 = are.P1 if P1 is None else np.asarray(P1, float)
    P2 = are.P2 if P2 is None else np.asarray(P2, float)
    parts = riccati_parts(dm, P1, P2)
    G = parts.calQ + parts.calS.mT @ parts.theta  # (2, m0, n, n)
    P = np.stack([P1, P2])
    T_end = cfg.s + horizon
    times = cfg.s + horizon * np.arange(1, buckets + 1) / buckets
    paths = [sample_path(dm.gen, cfg.s, cfg.iota, T_end, path_rng(cfg.seed, p)) for p in range(cfg.N)]
    occ = occupation_times(paths, times, dm.m0)
    reg = np.array([[p.regime_at(t) for t in times] for p in paths])
    # M[path, time, k, a, b]
    M = np.moveaxis(P[:, reg], 0, 2) + np.einsum("ptr,krab->ptkab", occ, G)
    start = P[:, cfg.iota]
    mean = M.mean(axis=0)
    se = M.std(axis=0, ddof=1) / np.sqrt(cfg.N) if cfg.N > 1 else np.zeros_like(mean)
    dev = mean - start[None]
    iu = np.triu_indices(dm.n)
    dev = dev[..., iu[0], iu[1]]
    se = se[..., iu[0], iu[1]]
    tol = 1e-12 * max(1.0, float(np.abs(P).max()))
    z = np.where(se > 0, dev / np.where(se > 0, se, 1.0), np.where(np.abs(dev) < tol, 0.0, np.inf))
    return MartingaleReport(times, z, float(np.abs(z).max()), threshold)


@dataclass
class ConditionalMeanReport:
    times: np.ndarray
    X_mean: np.ndarray
    X_se: np.ndarray
    X2: np.ndarray
    X1_mean: np.ndarray
    X1_se: np.ndarray
    max_abs_z: float
    threshold: float

    @property
    def passed(self) -> bool:
        return bool(self.max_abs_z < self.threshold)

    def to_dict(self) -> dict:
        return {"times": self.times.tolist(), "X_mean": self.X_mean.tolist(), "X_se": self.X_se.tolist(),
                "X2": self.X2.tolist(), "max_abs_z": self.max_abs_z, "threshold": self.threshold,
                "passed": self.passed}


def conditional_mean_check(dm: DecomposedModel, law: ControlLaw, cfg: SimConfig, path: ChainPath,
                           threshold: float = 3.0) -> ConditionalMeanReport:
    """Nested Monte Carlo of ``E[X | chain]`` along one fixed chain path.

    Every Brownian replicate must reproduce the same ``X2`` (it depends on
    the chain only), and the replicate mean of ``X = X1 + X2`` must match it.
    The max z-score is taken over record times after ``s``.
    """
    batch = simulate_paths(dm, law, cfg, fixed_path=path, T_end=path.end_time)
    mo = batch.moment(0)
    X2 = mo["X2"]
    if np.any(mo["X2_se"] > 1e-9 * (1 + np.abs(X2))):
        raise AssertionError("X2 differs across Brownian replicates on a fixed chain path")
    se = mo["X_se"]
    dev = mo["X"] - X2
    z = np.where(se > 0, dev / np.where(se > 0, se, 1.0), np.where(np.abs(dev) < 1e-12, 0.0, np.inf))
    return ConditionalMeanReport(batch.record_times, mo["X"], se, X2, mo["X1"], mo["X1_se"],
                                 float(np.abs(z[1:]).max()) if z.shape[0] > 1 else 0.0, threshold)
