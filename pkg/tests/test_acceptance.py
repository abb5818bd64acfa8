"""Acceptance battery. Each test prints one PASS/FAIL line and then asserts."""
import time

import numpy as np
import pytest

from switchlq.api import RunOptions, check_stability
from switchlq.bsde import compute_offsets, optimal_value, solve_adjoint
from switchlq.chain import sample_path, validate_generator
from switchlq.errors import BlowUp, NotStabilizing
from switchlq.model import InhomogeneityProcess, decompose, make_problem
from switchlq.riccati import finite_horizon_values, newton_kleinman, solve_are
from switchlq.sim import (ControlLaw, SimConfig, conditional_mean_check, constant_direction, estimate_cost,
                          martingale_check, random_directions, stationarity_check)

from instances import dm_from, load, random_instance, random_suite, scalar_benchmark

ROOT2 = np.sqrt(2) - 1
SIGNS = ("derivation", "final")


@pytest.fixture
def verdict(capsys):
    def emit(num, name, ok, detail=""):
        with capsys.disabled():
            print(f"\ncriterion {num} {'PASS' if ok else 'FAIL'}: {name} {detail}".rstrip())
        return ok
    return emit


@pytest.fixture(scope="module")
def n2_instance():
    dm = random_instance(np.random.default_rng(7))
    are = solve_are(dm)
    adj = solve_adjoint(dm, are)
    return dm, are, adj


@pytest.fixture(scope="module")
def inhom():
    cfg = load("two_regime_inhomogeneous.json")
    dm = dm_from("two_regime_inhomogeneous.json")
    are = solve_are(dm)
    adj = solve_adjoint(dm, are)
    law = ControlLaw(are.theta, compute_offsets(dm, are, adj))
    ini = cfg["initial"]
    sim = dict(s=ini["s"], iota=ini["regime"], xi2=tuple(ini["xi2"]), xi1_coef=tuple(ini["xi1_coef"]))
    return dm, are, adj, law, sim


def test_fast_switching_stability(verdict):
    t0 = time.perf_counter()
    rep = check_stability(load("fast_switching.json"), RunOptions()).report
    elapsed = time.perf_counter() - t0
    target = (-11 + np.sqrt(65)) / 2
    ratio = rep["P_ratio_to_regime0"][1]
    ok = (rep["stable"] and abs(rep["abscissa"] - target) < 1e-9 and 1 / 3 < ratio < 4 / 5 and elapsed < 1.0)
    assert verdict(1, "fast-switching stability", ok,
                   f"abscissa={rep['abscissa']:.12f} ratio={ratio:.4f} time={elapsed:.3f}s")


def test_scalar_are_and_method_agreement(verdict):
    t0 = time.perf_counter()
    dm = scalar_benchmark()
    errs = []
    for sol in (solve_are(dm), newton_kleinman(dm)):
        errs.append(max(np.abs(sol.P1 - ROOT2).max(), np.abs(sol.P2 - ROOT2).max()))
    gap = 0.0
    for d in random_suite(20, seed=2024):
        a, b = solve_are(d), newton_kleinman(d)
        gap = max(gap, np.abs(a.P1 - b.P1).max(), np.abs(a.P2 - b.P2).max())
    elapsed = time.perf_counter() - t0
    ok = max(errs) < 1e-8 and gap < 1e-6 and elapsed < 10.0
    assert verdict(2, "scalar ARE closed form", ok,
                   f"err={max(errs):.2e} suite_gap={gap:.2e} time={elapsed:.2f}s")


def test_monotone_horizon_limit(verdict):
    worst = np.inf
    for dm in random_suite(20, seed=2024):
        vals = finite_horizon_values(dm, [1, 2, 4, 8, 16])
        for lo, hi in zip(vals[:-1], vals[1:]):
            worst = min(worst, np.linalg.eigvalsh(hi - lo).min())
    assert verdict(3, "monotone horizon limit", worst >= -1e-9, f"min_eig={worst:.3e}")


def test_homogeneous_value_identity(verdict, n2_instance):
    dm, are, adj = n2_instance
    s, iota, c, xi2 = 0.5, 1, np.array([0.3, 0.4]), np.array([1.0, -0.5])
    # E|c W(s)|^2_P = s <P c, c>
    closed = 0.5 * (s * c @ are.P1[iota] @ c + xi2 @ are.P2[iota] @ xi2)
    assert np.isclose(optimal_value(s, iota, c, xi2, dm, are, adj), closed, atol=1e-12)
    law = ControlLaw(are.theta, compute_offsets(dm, are, adj))
    t0 = time.perf_counter()
    est = estimate_cost(dm, law, SimConfig(dt=1e-3, N=10_000, s=s, iota=iota, xi2=tuple(xi2), xi1_coef=tuple(c)))
    elapsed = time.perf_counter() - t0
    z = (est.mean - closed) / est.stderr
    ok = abs(z) < 3 and elapsed < 120
    assert verdict(4, "homogeneous value identity", ok,
                   f"mc={est.mean:.5f}+-{est.stderr:.5f} value={closed:.5f} z={z:.2f} time={elapsed:.1f}s")


def test_nonhomogeneous_value_and_sign(verdict, inhom):
    dm, are, adj, law, sim = inhom
    est = estimate_cost(dm, law, SimConfig(dt=1e-3, N=10_000, **sim))
    z = {}
    for sg in SIGNS:
        v = optimal_value(sim["s"], sim["iota"], sim["xi1_coef"], sim["xi2"], dm, are, adj, sg)
        z[sg] = (est.mean - v) / est.stderr
    agreeing = [sg for sg in SIGNS if abs(z[sg]) < 3]
    detail = f"mc={est.mean:.5f}+-{est.stderr:.5f} " + " ".join(f"z_{k}={v:.2f}" for k, v in z.items())
    assert verdict(5, "nonhomogeneous value", bool(agreeing), f"{detail} sign={agreeing}")


def test_stationarity_battery(verdict, inhom):
    dm, are, adj, law, sim = inhom
    cfg = SimConfig(dt=1e-3, N=2000, **sim)
    rep = stationarity_check(dm, law, cfg, random_directions(dm, 8, seed=0), eps=0.1, are=are)
    # strict form: no allowance for discretization bias
    strict = [abs(d.derivative) < 3 * d.stderr and d.curvature > 0 for d in rep.directions]
    try:
        neg = stationarity_check(dm, ControlLaw(are.theta.shifted(0.1), law.offsets), cfg,
                                 [constant_direction(dm)], eps=0.1)
        zneg = abs(neg.directions[0].z)
    except (BlowUp, NotStabilizing):
        zneg = np.inf
    ok = all(strict) and zneg > 5
    zs = " ".join(f"{d.z:.2f}" for d in rep.directions)
    assert verdict(6, "stationarity", ok, f"z=[{zs}] negative_control_z={zneg:.2f}")


def test_martingale_property(verdict, n2_instance):
    dm, are, _ = n2_instance
    cfg = SimConfig(dt=1e-3, N=10_000)
    rep = martingale_check(dm, are, cfg)
    neg = martingale_check(dm, are, cfg, P1=are.P1 + 0.1, P2=are.P2 + 0.1)
    ok = rep.max_abs_z < 3 and neg.max_abs_z > 5
    assert verdict(7, "martingale property", ok,
                   f"max_z={rep.max_abs_z:.2f} negative_control_z={neg.max_abs_z:.1f}")


def _adjoint_problem(a):
    g = validate_generator(np.zeros((1, 1)), warn=False)
    one = np.ones((1, 2, 1))
    q = InhomogeneityProcess.from_arrays(1.0, [0.0, 1.0], one)
    dm = decompose(make_problem(g, 1, 1, A=-a, B=0.0, Q=1.0, q=q))
    return dm, solve_are(dm)


def _closed_adjoint(a, t):
    return np.where(t <= 1.0, (1 - np.exp(-a * (1 - np.minimum(t, 1.0)))) / a, 0.0)


def test_bsde_solver(verdict):
    err = 0.0
    beyond_zero = True
    for a in (0.5, 1.0, 2.0):
        dm, are = _adjoint_problem(a)
        adj = solve_adjoint(dm, are, step=0.01)
        err = max(err, np.abs(adj.y2[:, 0, 0] - _closed_adjoint(a, adj.times)).max())
        late = adj.times > 1.0
        beyond_zero &= not adj.y2[late].any() and not adj.y2_at(np.array([1.5, 10.0]), [0, 0]).any()
    dm, are = _adjoint_problem(2.0)
    errs = []
    for h in (0.1, 0.05, 0.025):
        adj = solve_adjoint(dm, are, step=2 * h, check=False)
        errs.append(np.abs(adj.y2[:, 0, 0] - _closed_adjoint(2.0, adj.times)).max())
    ratios = [errs[0] / errs[1], errs[1] / errs[2]]
    ok = err < 1e-8 and all(13 < r < 19 for r in ratios) and beyond_zero
    assert verdict(8, "BSDE solver", ok,
                   f"err={err:.2e} ratios={ratios[0]:.2f},{ratios[1]:.2f} zero_beyond_support={beyond_zero}")


def test_conditional_expectation_oracle(verdict, inhom):
    dm, are, adj, law, sim = inhom
    T = sim["s"] + 2.5
    path = sample_path(dm.gen, sim["s"], sim["iota"], T, np.random.default_rng([0, 2**31]))
    rep = conditional_mean_check(dm, law, SimConfig(dt=1e-3, N=10_000, record_dt=0.25, **sim), path)
    assert verdict(9, "conditional expectation oracle", rep.passed,
                   f"max_z={rep.max_abs_z:.2f} jumps={path.n_jumps}")
