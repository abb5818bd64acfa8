"""Finite-state continuous-time Markov chains.

Generator validation, transition probabilities, exact path sampling, the
action of the generator on regime-indexed data and the compensated jump
martingales of a sampled path.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import expm

from .errors import DimensionMismatch, NegativeRate, NonSquare, RowSumViolation, ZeroRateWarning

ROW_SUM_TOL = 1e-12


@dataclass(frozen=True)
class Generator:
    """Rate matrix of a finite-state chain.

    Attributes
    ----------
    lam : ndarray, shape (m0, m0)
        Jump intensities. Off-diagonal entries are nonnegative and rows sum
        to zero.
    zero_rates : tuple of (int, int)
        Off-diagonal positions holding an exact zero rate.
    """

    lam: np.ndarray
    zero_rates: tuple = field(default=())

    @property
    def m0(self) -> int:
        return self.lam.shape[0]

    def exit_rates(self) -> np.ndarray:
        return -np.diag(self.lam)

    def stationary(self) -> np.ndarray:
        """Left null vector normalised to a probability vector."""
        m = self.m0
        a = np.vstack([self.lam.T, np.ones((1, m))])
        rhs = np.zeros(m + 1)
        rhs[-1] = 1.0
        pi, *_ = np.linalg.lstsq(a, rhs, rcond=None)
        return pi


def validate_generator(lam, warn: bool = True) -> Generator:
    """Check the q-property and wrap the matrix.

    Parameters
    ----------
    lam : array_like
        Candidate rate matrix.
    warn : bool
        Emit :class:`ZeroRateWarning` when an off-diagonal rate is exactly zero.

    Raises
    ------
    NonSquare, NegativeRate, RowSumViolation
    """
    a = np.array(lam, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise NonSquare(f"generator must be a nonempty square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonSquare("generator has non-finite entries")
    m = a.shape[0]
    off = ~np.eye(m, dtype=bool)
    bad = np.argwhere((a < 0) & off)
    if bad.size:
        i, j = bad[0]
        raise NegativeRate(f"negative rate lambda[{i},{j}] = {a[i, j]}")
    rs = a.sum(axis=1)
    k = int(np.argmax(np.abs(rs)))
    if abs(rs[k]) > ROW_SUM_TOL:
        raise RowSumViolation(f"row {k} sums to {rs[k]:.3e}, expected 0")
    zeros = tuple((int(i), int(j)) for i, j in np.argwhere((a == 0) & off))
    if zeros and warn:
        warnings.warn(f"zero off-diagonal rates at {list(zeros)}", ZeroRateWarning, stacklevel=2)
    a.setflags(write=False)
    return Generator(a, zeros)


def transition_matrix(g: Generator, t: float) -> np.ndarray:
    """Return ``expm(t * lam)``, the transition probabilities over time ``t``."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    p = expm(t * g.lam)
    # clip tiny negative roundoff and renormalise rows
    p = np.clip(p, 0.0, 1.0)
    return p / p.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class ChainPath:
    """Piecewise-constant chain trajectory on ``[start_time, end_time]``.

    ``regimes[k]`` is the state on ``[t_k, t_{k+1})`` where ``t_0 = start_time``
    and ``t_k = jump_times[k-1]``.
    """

    start_time: float
    end_time: float
    jump_times: np.ndarray
    regimes: np.ndarray

    def __post_init__(self):
        jt = np.asarray(self.jump_times, dtype=float)
        rg = np.asarray(self.regimes, dtype=int)
        if rg.size != jt.size + 1:
            raise ValueError("need exactly one more regime than jump times")
        if jt.size and (np.any(np.diff(jt) <= 0) or jt[0] <= self.start_time or jt[-1] > self.end_time):
            raise ValueError("jump times must be strictly increasing inside (start, end]")
        if np.any(rg[1:] == rg[:-1]):
            raise ValueError("consecutive regimes must differ")
        object.__setattr__(self, "jump_times", jt)
        object.__setattr__(self, "regimes", rg)

    @property
    def n_jumps(self) -> int:
        return self.jump_times.size

    def regime_at(self, t) -> np.ndarray | int:
        """Regime at time(s) ``t`` (right-continuous)."""
        k = np.searchsorted(self.jump_times, t, side="right")
        return self.regimes[k]

    def occupation(self, m0: int, t: float | None = None) -> np.ndarray:
        """Time spent in each regime on ``[start_time, t]``."""
        t = self.end_time if t is None else t
        edges = np.concatenate([[self.start_time], self.jump_times, [np.inf]])
        lo = np.minimum(edges[:-1], t)
        hi = np.minimum(edges[1:], t)
        return np.bincount(self.regimes, weights=hi - lo, minlength=m0)

    def to_csv(self, path) -> None:
        """Write ``t_jump, regime`` rows; the first row is the start time."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_jump", "regime"])
            w.writerow([repr(float(self.start_time)), int(self.regimes[0])])
            for t, r in zip(self.jump_times, self.regimes[1:]):
                w.writerow([repr(float(t)), int(r)])


def path_rng(seed: int, path_index: int) -> np.random.Generator:
    """Independent reproducible stream for one Monte Carlo path."""
    return np.random.default_rng([int(seed), int(path_index)])


_BATCH = 32


def _jump_tables(g: Generator) -> tuple[np.ndarray, np.ndarray]:
    rates = -np.diag(g.lam)
    p = np.clip(g.lam, 0.0, None)
    np.fill_diagonal(p, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(rates[:, None] > 0, p / rates[:, None], 0.0)
    cum = np.cumsum(p, axis=1)
    # pin the cdf at the last reachable state so roundoff cannot select past it
    for i in range(p.shape[0]):
        pos = np.flatnonzero(p[i] > 0)
        if pos.size:
            cum[i, pos[-1]:] = np.inf
    return rates, cum


def sample_path(g: Generator, s: float, iota: int, T: float, rng) -> ChainPath:
    """Sample a chain path exactly on ``[s, T]`` starting in ``iota``.

    Parameters
    ----------
    rng : numpy.random.Generator or int
        Random stream; an int is used as a seed.
    """
    if not T > s:
        raise ValueError("horizon must exceed start time")
    if not 0 <= iota < g.m0:
        raise ValueError(f"regime {iota} out of range")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    rates, cum = _jump_tables(g)
    times: list[float] = []
    regs = [int(iota)]
    t = float(s)
    i = int(iota)
    # holding times and selection uniforms are drawn in batches of 32
    k = _BATCH
    while rates[i] > 0:  # stops at absorbing states
        if k == _BATCH:
            ex = rng.standard_exponential(_BATCH)
            un = rng.random(_BATCH)
            k = 0
        t += ex[k] / rates[i]
        if t > T:
            break
        i = int(np.searchsorted(cum[i], un[k], side="right"))
        k += 1
        times.append(t)
        regs.append(i)
    return ChainPath(float(s), float(T), np.array(times), np.array(regs))


def apply_generator(g: Generator, sigma, iota: int | None = None) -> np.ndarray:
    """Evaluate ``sum_j lam[iota, j] * sigma[j]``.

    ``sigma`` is indexed by regime on its leading axis. With ``iota=None`` the
    result for every regime is returned stacked on the leading axis.
    """
    s = np.asarray(sigma, dtype=float)
    if s.ndim < 1 or s.shape[0] != g.m0:
        raise DimensionMismatch(f"expected {g.m0} regimes on axis 0, got shape {s.shape}")
    out = np.tensordot(g.lam, s, axes=(1, 0))
    return out if iota is None else out[iota]


@dataclass(frozen=True)
class CompensatedJumpProcess:
    """Jump counts, compensators and martingale values ``M = N - <N>``.

    ``counts[i, j]`` and ``compensator[i, j]`` are evaluated at ``t``.
    """

    t: float
    counts: np.ndarray
    compensator: np.ndarray

    @property
    def martingale(self) -> np.ndarray:
        return self.counts - self.compensator


def compensated_increments(g: Generator, path: ChainPath, t: float | None = None) -> CompensatedJumpProcess:
    """Exact compensated jump martingale of ``path`` at time ``t`` (default end)."""
    if path.regimes.max(initial=0) >= g.m0:
        raise DimensionMismatch("path visits a regime outside the generator's state space")
    t = path.end_time if t is None else float(t)
    m = g.m0
    counts = np.zeros((m, m))
    k = np.searchsorted(path.jump_times, t, side="right")
    np.add.at(counts, (path.regimes[:k], path.regimes[1:k + 1]), 1.0)
    occ = path.occupation(m, t)
    comp = g.lam * occ[:, None]
    np.fill_diagonal(comp, 0.0)
    return CompensatedJumpProcess(t, counts, comp)


def paths_to_arrays(paths: Sequence[ChainPath]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pad a batch of paths into ``(jump_times, regimes, n_jumps)`` arrays.

    Missing jump times are filled with ``inf`` and trailing regimes repeat the
    last visited regime.
    """
    n = len(paths)
    kmax = max((p.n_jumps for p in paths), default=0)
    jt = np.full((n, kmax + 1), np.inf)
    rg = np.empty((n, kmax + 1), dtype=np.int64)
    nj = np.empty(n, dtype=np.int64)
    for i, p in enumerate(paths):
        k = p.n_jumps
        jt[i, :k] = p.jump_times
        rg[i, :k + 1] = p.regimes
        rg[i, k + 1:] = p.regimes[-1]
        nj[i] = k
    return jt, rg, nj
