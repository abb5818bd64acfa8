"""Problem data, standing-assumption checks and the two-component decomposition.

A problem is described per regime by the state matrices ``A, C`` (n x n),
input matrices ``B, D`` (n x m), the weights ``Q`` (n x n), ``S`` (m x n) and
``R`` (m x m), each with a mean-field companion (``Abar`` and so on), plus
inhomogeneous terms ``b, sigma, q, r`` and mean-field cost terms ``qbar, rbar``.

Inhomogeneous terms live in the class

    value(t) = g(t, alpha(t)) + h(t, alpha(t)) * W(t),   0 <= t <= T_in,

with ``g`` and ``h`` piecewise linear in ``t`` and zero after ``T_in``. The
chain-conditional mean keeps ``g`` and drops ``h * W`` (the Brownian motion
has zero mean given the chain), so the class is closed under both projections.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .chain import Generator, validate_generator
from .errors import ConfigError, DimensionMismatch

PD_MARGIN = 1e-10
SYM_TOL = 1e-10

MATRIX_KEYS = ("A", "Abar", "B", "Bbar", "C", "Cbar", "D", "Dbar", "Q", "Qbar", "S", "Sbar", "R", "Rbar")
INHOM_KEYS = ("b", "sigma", "q", "qbar", "r", "rbar")


@dataclass(frozen=True)
class RegimeGrid:
    """Piecewise-linear function of ``(t, regime)`` with values in ``R^d``.

    Parameters
    ----------
    times : ndarray, shape (K,)
        Strictly increasing breakpoints.
    values : ndarray, shape (m0, K, d)
        Values at the breakpoints.
    support_end : float
        The function vanishes for ``t > support_end``. Between the last
        breakpoint and ``support_end`` the last value is held, and before the
        first breakpoint the first value is held.
    """

    times: np.ndarray
    values: np.ndarray
    support_end: float

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).reshape(-1)
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 3 or v.shape[1] != t.size:
            raise DimensionMismatch(f"values shape {v.shape} incompatible with {t.size} breakpoints")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ConfigError("breakpoints must be strictly increasing")
        if t.size and t[-1] > self.support_end + 1e-14:
            raise ConfigError("breakpoints extend past the support end")
        if self.support_end < 0:
            raise ConfigError("support end must be nonnegative")
        t.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "support_end", float(self.support_end))

    @classmethod
    def zeros(cls, m0: int, d: int) -> "RegimeGrid":
        return cls(np.zeros(1), np.zeros((m0, 1, d)), 0.0)

    @property
    def m0(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    @property
    def is_zero(self) -> bool:
        return not np.any(self.values)

    def __call__(self, t, regime) -> np.ndarray:
        """Evaluate at broadcastable ``t`` and ``regime``; trailing axis is ``d``."""
        t = np.asarray(t, dtype=float)
        regime = np.asarray(regime, dtype=np.intp)
        t, regime = np.broadcast_arrays(t, regime)
        tk = self.times
        if tk.size == 1:
            out = self.values[regime, 0]
        else:
            k = np.clip(np.searchsorted(tk, t, side="right") - 1, 0, tk.size - 2)
            w = np.clip((t - tk[k]) / (tk[k + 1] - tk[k]), 0.0, 1.0)[..., None]
            out = (1.0 - w) * self.values[regime, k] + w * self.values[regime, k + 1]
        return np.where((t <= self.support_end)[..., None], out, 0.0)

    def scaled(self, c: float) -> "RegimeGrid":
        return RegimeGrid(self.times, c * self.values, self.support_end)

    def __add__(self, other: "RegimeGrid") -> "RegimeGrid":
        if self.is_zero:
            return other
        if other.is_zero:
            return self
        end = max(self.support_end, other.support_end)
        cut = min(self.support_end, other.support_end)
        times = np.union1d(np.union1d(self.times, other.times), [cut])
        if cut < end:
            # the shorter function drops to zero just after its support end
            times = np.union1d(times, [np.nextafter(cut, np.inf)])
        regs = np.arange(self.m0)[:, None]
        vals = self(times[None, :], regs) + other(times[None, :], regs)
        return RegimeGrid(times, vals, end)


@dataclass(frozen=True)
class InhomogeneityProcess:
    """Process ``g(t, alpha) + h(t, alpha) W(t)`` supported on ``[0, T_in]``."""

    g: RegimeGrid
    h: RegimeGrid

    def __post_init__(self):
        if self.g.values.shape[0] != self.h.values.shape[0] or self.g.dim != self.h.dim:
            raise DimensionMismatch("deterministic and Wiener-linear parts disagree in shape")

    @classmethod
    def zeros(cls, m0: int, d: int) -> "InhomogeneityProcess":
        z = RegimeGrid.zeros(m0, d)
        return cls(z, z)

    @classmethod
    def from_arrays(cls, T_in: float, breakpoints, g, h=None) -> "InhomogeneityProcess":
        g = np.asarray(g, dtype=float)
        h = np.zeros_like(g) if h is None else np.asarray(h, dtype=float)
        return cls(RegimeGrid(breakpoints, g, T_in), RegimeGrid(breakpoints, h, T_in))

    @property
    def T_in(self) -> float:
        return max(self.g.support_end, self.h.support_end)

    @property
    def dim(self) -> int:
        return self.g.dim

    @property
    def m0(self) -> int:
        return self.g.m0

    @property
    def is_zero(self) -> bool:
        return self.g.is_zero and self.h.is_zero

    def breakpoints(self) -> np.ndarray:
        pts = [self.g.times, self.h.times, [self.g.support_end, self.h.support_end]]
        return np.unique(np.concatenate([np.asarray(p, float) for p in pts]))

    def __call__(self, t, regime, w) -> np.ndarray:
        """Value given the Brownian level ``w`` (broadcast against ``t``)."""
        return self.g(t, regime) + self.h(t, regime) * np.asarray(w, dtype=float)[..., None]


def project(k: int, proc: InhomogeneityProcess) -> InhomogeneityProcess:
    """Chain-conditional projections.

    ``k = 2`` keeps the chain-deterministic part, ``k = 1`` keeps the
    Wiener-linear part. Both maps are idempotent and their ranges are
    orthogonal.
    """
    z = RegimeGrid.zeros(proc.m0, proc.dim)
    if k == 2:
        return InhomogeneityProcess(proc.g, z)
    if k == 1:
        return InhomogeneityProcess(z, proc.h)
    raise ValueError("component must be 1 or 2")


def _per_regime(x, m0: int, shape: tuple[int, int], name: str) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if shape == (1, 1) and a.ndim <= 1:
        # scalar problems: allow a number or one number per regime
        a = a.reshape(-1, 1, 1) if a.ndim == 1 else a.reshape(1, 1)
    if a.shape == shape:
        a = np.broadcast_to(a, (m0,) + shape).copy()
    if a.shape != (m0,) + shape:
        raise DimensionMismatch(f"{name}: expected shape {(m0,) + shape}, got {a.shape}")
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Problem:
    """Original (undecomposed) problem data; matrices stacked over regimes."""

    n: int
    m: int
    gen: Generator
    A: np.ndarray
    Abar: np.ndarray
    B: np.ndarray
    Bbar: np.ndarray
    C: np.ndarray
    Cbar: np.ndarray
    D: np.ndarray
    Dbar: np.ndarray
    Q: np.ndarray
    Qbar: np.ndarray
    S: np.ndarray
    Sbar: np.ndarray
    R: np.ndarray
    Rbar: np.ndarray
    b: InhomogeneityProcess
    sigma: InhomogeneityProcess
    q: InhomogeneityProcess
    qbar: InhomogeneityProcess
    r: InhomogeneityProcess
    rbar: InhomogeneityProcess

    @property
    def m0(self) -> int:
        return self.gen.m0

    @property
    def T_in(self) -> float:
        return max(getattr(self, k).T_in for k in INHOM_KEYS)


def make_problem(gen, n: int, m: int, **kw) -> Problem:
    """Build a :class:`Problem`, defaulting missing data to zero.

    Matrices may be given per regime (leading axis ``m0``) or as one matrix
    shared by all regimes. ``R`` defaults to the identity.
    """
    if not isinstance(gen, Generator):
        gen = validate_generator(gen)
    m0 = gen.m0
    shapes = {"A": (n, n), "C": (n, n), "Q": (n, n), "B": (n, m), "D": (n, m), "S": (m, n), "R": (m, m)}
    mats = {}
    for key in MATRIX_KEYS:
        base = key[:-3] if key.endswith("bar") else key
        default = np.eye(m) if key == "R" else np.zeros(shapes[base])
        mats[key] = _per_regime(kw.pop(key, default), m0, shapes[base], key)
    inh = {}
    for key in INHOM_KEYS:
        d = m if key in ("r", "rbar") else n
        p = kw.pop(key, None)
        if p is None:
            p = InhomogeneityProcess.zeros(m0, d)
        if p.m0 != m0 or p.dim != d:
            raise DimensionMismatch(f"{key}: expected {m0} regimes and dimension {d}, got {p.m0} and {p.dim}")
        inh[key] = p
    if kw:
        raise ConfigError(f"unknown fields: {sorted(kw)}")
    return Problem(n=n, m=m, gen=gen, **mats, **inh)


@dataclass
class ValidationReport:
    ok: bool = True
    violations: list[dict] = field(default_factory=list)
    margins: dict[str, list[float]] = field(default_factory=dict)

    def add(self, check: str, message: str, component: int | None = None, regime: int | None = None, value: float | None = None):
        self.ok = False
        self.violations.append(
            {"check": check, "component": component, "regime": regime, "value": value, "message": message}
        )

    def raise_if_failed(self):
        if not self.ok:
            msgs = "; ".join(v["message"] for v in self.violations)
            raise ConfigError(f"problem data violates standing assumptions: {msgs}")


def _min_eig(a: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(0.5 * (a + a.T))[0])


def validate(prob: Problem) -> ValidationReport:
    """Check symmetry, positivity of ``R_k`` and the convexity margin.

    The margin for component ``k`` in regime ``i`` is the smallest eigenvalue
    of ``Q_k - S_k^T R_k^{-1} S_k``; it must exceed ``1e-10``.
    Never raises; every violation is listed in the report.
    """
    rep = ValidationReport()
    Qs = {1: prob.Q, 2: prob.Q + prob.Qbar}
    Ss = {1: prob.S, 2: prob.S + prob.Sbar}
    Rs = {1: prob.R, 2: prob.R + prob.Rbar}
    for k in (1, 2):
        rep.margins[f"R{k}"] = []
        rep.margins[f"Q{k}"] = []
        for i in range(prob.m0):
            Q, S, R = Qs[k][i], Ss[k][i], Rs[k][i]
            for name, M in (("Q", Q), ("R", R)):
                asym = float(np.max(np.abs(M - M.T), initial=0.0))
                if asym > SYM_TOL:
                    rep.add("symmetry", f"{name}{k} not symmetric in regime {i} (|M-M^T|={asym:.2e})", k, i, asym)
            lr = _min_eig(R)
            rep.margins[f"R{k}"].append(lr)
            if lr <= PD_MARGIN:
                rep.add("R_positive", f"R{k} not positive definite in regime {i} (min eig {lr:.6g})", k, i, lr)
                rep.margins[f"Q{k}"].append(float("nan"))
                continue
            schur = Q - S.T @ np.linalg.solve(R, S)
            mq = _min_eig(schur)
            rep.margins[f"Q{k}"].append(mq)
            if mq <= PD_MARGIN:
                rep.add("convexity", f"Q{k} - S{k}^T R{k}^-1 S{k} not positive definite in regime {i} (margin {mq:.6g})", k, i, mq)
    for key in ("qbar", "rbar"):
        if not getattr(prob, key).h.is_zero:
            rep.add("chain_adapted", f"{key} must be chain-deterministic (nonzero Wiener-linear part)")
    return rep


@dataclass(frozen=True)
class Component:
    """Coefficients of one decomposed component, stacked over regimes."""

    k: int
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    Q: np.ndarray
    S: np.ndarray
    R: np.ndarray
    b: InhomogeneityProcess
    sigma: InhomogeneityProcess
    q: InhomogeneityProcess
    r: InhomogeneityProcess


@dataclass(frozen=True)
class DecomposedModel:
    """Two-component model: component 2 is the chain-conditional mean part."""

    n: int
    m: int
    gen: Generator
    c1: Component
    c2: Component

    @property
    def m0(self) -> int:
        return self.gen.m0

    def comp(self, k: int) -> Component:
        return self.c1 if k == 1 else self.c2

    @property
    def T_in(self) -> float:
        return max(getattr(c, f).T_in for c in (self.c1, self.c2) for f in ("b", "sigma", "q", "r"))

    def is_homogeneous(self) -> bool:
        return all(getattr(c, f).is_zero for c in (self.c1, self.c2) for f in ("b", "sigma", "q", "r"))


def _sum_proc(p1: InhomogeneityProcess, p2: InhomogeneityProcess) -> InhomogeneityProcess:
    return InhomogeneityProcess(p1.g + p2.g, p1.h + p2.h)


def decompose(prob: Problem, check: bool = True) -> DecomposedModel:
    """Apply the coefficient maps and project the inhomogeneities.

    Component 1 takes the plain coefficients, component 2 the sums with the
    mean-field companions. ``q_2`` is the deterministic part of ``q + qbar``
    and ``q_1`` the Wiener-linear part of ``q``; ``r`` likewise.
    """
    if check:
        validate(prob).raise_if_failed()
    c1 = Component(
        1, prob.A, prob.B, prob.C, prob.D, prob.Q, prob.S, prob.R,
        project(1, prob.b), project(1, prob.sigma), project(1, prob.q), project(1, prob.r),
    )
    c2 = Component(
        2, prob.A + prob.Abar, prob.B + prob.Bbar, prob.C + prob.Cbar, prob.D + prob.Dbar,
        prob.Q + prob.Qbar, prob.S + prob.Sbar, prob.R + prob.Rbar,
        project(2, prob.b), project(2, prob.sigma),
        project(2, _sum_proc(prob.q, prob.qbar)), project(2, _sum_proc(prob.r, prob.rbar)),
    )
    return DecomposedModel(prob.n, prob.m, prob.gen, c1, c2)


# -- config files -----------------------------------------------------------------


def _proc_from_dict(d: dict | None, m0: int, dim: int, key: str) -> InhomogeneityProcess:
    if d is None:
        return InhomogeneityProcess.zeros(m0, dim)
    try:
        T_in = float(d["T_in"])
        bp = np.asarray(d["breakpoints"], dtype=float)
        g = np.asarray(d.get("g", np.zeros((m0, bp.size, dim))), dtype=float)
        h = np.asarray(d.get("h", np.zeros((m0, bp.size, dim))), dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"inhomogeneity {key!r} malformed: {exc}") from None
    for name, a in (("g", g), ("h", h)):
        if a.shape != (m0, bp.size, dim):
            raise DimensionMismatch(f"{key}.{name}: expected shape {(m0, bp.size, dim)}, got {a.shape}")
    return InhomogeneityProcess(RegimeGrid(bp, g, T_in), RegimeGrid(bp, h, T_in))


def problem_from_dict(cfg: dict[str, Any]) -> Problem:
    """Parse a config mapping (the JSON schema documented in the README)."""
    try:
        n = int(cfg["n"])
        m = int(cfg["m"])
        lam = cfg["generator"]
        regimes = cfg["regimes"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"missing or malformed top-level field: {exc}") from None
    if n < 1 or m < 1:
        raise ConfigError("n and m must be positive")
    gen = validate_generator(lam)
    if len(regimes) != gen.m0:
        raise DimensionMismatch(f"{len(regimes)} regime blocks for a {gen.m0}-state generator")
    kw: dict[str, Any] = {}
    for key in MATRIX_KEYS:
        vals = [r.get(key) for r in regimes]
        if all(v is None for v in vals):
            continue
        if any(v is None for v in vals):
            raise ConfigError(f"{key} given for some regimes only")
        try:
            kw[key] = np.array(vals, dtype=float)
        except ValueError as exc:
            raise DimensionMismatch(f"{key}: {exc}") from None
    inh = cfg.get("inhomogeneities") or {}
    unknown = set(inh) - set(INHOM_KEYS)
    if unknown:
        raise ConfigError(f"unknown inhomogeneities: {sorted(unknown)}")
    for key in INHOM_KEYS:
        kw[key] = _proc_from_dict(inh.get(key), gen.m0, m if key in ("r", "rbar") else n, key)
    return make_problem(gen, n, m, **kw)


def _grid_to_lists(p: InhomogeneityProcess) -> dict | None:
    if p.is_zero:
        return None
    bp = np.union1d(p.g.times, p.h.times)
    regs = np.arange(p.m0)[:, None]
    return {
        "T_in": p.T_in,
        "breakpoints": bp.tolist(),
        "g": p.g(bp[None, :], regs).tolist(),
        "h": p.h(bp[None, :], regs).tolist(),
    }


def problem_to_dict(prob: Problem) -> dict[str, Any]:
    regimes = [{k: getattr(prob, k)[i].tolist() for k in MATRIX_KEYS} for i in range(prob.m0)]
    inh = {k: d for k in INHOM_KEYS if (d := _grid_to_lists(getattr(prob, k))) is not None}
    return {"n": prob.n, "m": prob.m, "generator": prob.gen.lam.tolist(), "regimes": regimes, "inhomogeneities": inh}


def load_config(path) -> tuple[Problem, str]:
    """Read a JSON config; return the problem and the sha256 of the file bytes."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        cfg = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return problem_from_dict(cfg), hashlib.sha256(raw).hexdigest()


def _canonical(obj):
    # ints and floats hash alike so validated and raw configs agree
    if isinstance(obj, dict):
        return {k: _canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, (int, float)) and not isinstance(obj, bool):
        return float(obj)
    return obj


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(_canonical(cfg), sort_keys=True).encode()).hexdigest()
