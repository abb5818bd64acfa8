"""Problem instances shared by the test modules."""
import json
from pathlib import Path

import numpy as np

from switchlq.chain import validate_generator
from switchlq.model import decompose, make_problem, problem_from_dict
from switchlq.stability import is_stabilizer

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def load(name):
    return json.loads((CONFIGS / name).read_text())


def dm_from(name):
    return decompose(problem_from_dict(load(name)))


def scalar_benchmark(m0=1):
    lam = np.zeros((1, 1)) if m0 == 1 else np.array([[-1.0, 1.0], [1.0, -1.0]])
    g = validate_generator(lam, warn=False)
    return decompose(make_problem(g, 1, 1, A=-1.0, B=1.0, Q=1.0, R=1.0))


def fast_switching(**kw):
    g = validate_generator([[-10.0, 10.0], [1.0, -1.0]])
    kw = {"B": 1.0, "Q": 1.0, "R": 1.0, **kw}
    return decompose(make_problem(g, 1, 1, A=[1.0, -1.0], **kw))


def random_instance(rng, n=2, m=1, m0=2):
    """Random regime-switching problem that is mean-square stable at zero gain."""
    while True:
        off = rng.uniform(0.2, 3.0, (m0, m0))
        np.fill_diagonal(off, 0.0)
        lam = off - np.diag(off.sum(axis=1))
        A = rng.normal(0, 0.6, (m0, n, n)) - 1.2 * np.eye(n)
        Abar = rng.normal(0, 0.2, (m0, n, n))
        B = rng.normal(0, 1.0, (m0, n, m))
        Bbar = rng.normal(0, 0.2, (m0, n, m))
        C = rng.normal(0, 0.3, (m0, n, n))
        Cbar = rng.normal(0, 0.1, (m0, n, n))
        D = rng.normal(0, 0.3, (m0, n, m))
        L = rng.normal(0, 0.5, (m0, n, n))
        Q = L @ np.swapaxes(L, -1, -2) + 0.5 * np.eye(n)
        Qbar = 0.2 * np.eye(n) * rng.uniform(0, 1, (m0, 1, 1))
        R = np.eye(m) * rng.uniform(0.5, 2.0, (m0, 1, 1))
        g = validate_generator(lam, warn=False)
        dm = decompose(make_problem(g, n, m, A=A, Abar=Abar, B=B, Bbar=Bbar, C=C, Cbar=Cbar, D=D,
                                 Q=Q, Qbar=Qbar, R=R))
        if is_stabilizer(dm):
            return dm


def random_suite(count=20, seed=2024):
    rng = np.random.default_rng(seed)
    return [random_instance(rng) for _ in range(count)]
