import numpy as np
import pytest
from scipy.special import logsumexp

from prefinfer.envs import random_mdp
from prefinfer.regmdp import UtilityFamily

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


# ---------------------------------------------------------------------------
# independent oracles
# ---------------------------------------------------------------------------


def picard_fixed_point(P, U, rho, damping=0.5, tol=1e-14, max_iters=200_000):
    """Damped Picard iteration with scipy's logsumexp and explicit loops over states."""
    n_s, n_a = U.shape
    q = np.zeros((n_s, n_a))
    for _ in range(max_iters):
        v = np.array([logsumexp(q[s]) for s in range(n_s)])
        target = np.empty_like(q)
        for s in range(n_s):
            for a in range(n_a):
                target[s, a] = U[s, a] + rho * np.dot(P[s, a], v)
        new = (1 - damping) * q + damping * target
        if np.max(np.abs(new - q)) < tol:
            return new
        q = new
    raise AssertionError("oracle did not converge")


def power_series_occupancy(p_pi, gamma, mu, tol=1e-12):
    """Truncated sum of gamma^t mu^T P^t until gamma^T < tol."""
    d = np.zeros_like(mu, dtype=float)
    row = np.asarray(mu, dtype=float).copy()
    weight = 1.0
    while weight >= tol:
        d += weight * row
        row = row @ p_pi
        weight *= gamma
    return d


def loop_policy_transition(P, pi):
    n_s, n_a, _ = P.shape
    out = np.zeros((n_s, n_s))
    for s in range(n_s):
        for a in range(n_a):
            for t in range(n_s):
                out[s, t] += pi[s, a] * P[s, a, t]
    return out


def suite_instance(seed):
    """Property-suite instance: sizes and family vary with the seed."""
    rng = np.random.default_rng(10_000 + seed)
    n_s = int(rng.integers(2, 11))
    n_a = int(rng.integers(2, 6))
    family = UtilityFamily.exponential() if seed % 2 == 0 else UtilityFamily.linear()
    mdp, truth = random_mdp(seed, n_s, n_a, family)
    return mdp, family, truth


@pytest.fixture
def small_mdp():
    return random_mdp(7, 5, 3, UtilityFamily.exponential())
