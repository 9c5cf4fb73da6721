import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import loop_policy_transition, picard_fixed_point, power_series_occupancy
from prefinfer.envs import random_mdp
from prefinfer.errors import InvalidArgumentError
from prefinfer.regmdp import (
    PreferenceParams,
    TabularMdp,
    UtilityFamily,
    discounted_occupancy,
    policy_transition,
    soft_bellman_sweep,
    soft_q_iteration,
    soft_value,
    softmax_policy,
)

LINEAR = UtilityFamily.linear()


def one_state(n_actions=1, feature=1.0):
    p = np.ones((1, n_actions, 1))
    return TabularMdp(p, np.full((1, n_actions), feature))


# -- soft_value / softmax ----------------------------------------------------


def test_soft_value_symmetric_pair():
    assert soft_value(np.array([0.0, 0.0])) == pytest.approx(math.log(2), abs=1e-15)


def test_soft_value_single_action_is_identity():
    assert soft_value(np.array([3.7])) == 3.7


def test_soft_value_analytic_pair():
    assert soft_value(np.array([0.0, math.log(3)])) == pytest.approx(math.log(4), abs=1e-15)


def test_soft_value_is_overflow_safe():
    assert soft_value(np.array([1000.0, 1000.0])) == pytest.approx(1000 + math.log(2))


def test_soft_value_rejects_non_finite():
    with pytest.raises(InvalidArgumentError):
        soft_value(np.array([0.0, np.nan]))


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-100, 100))
def test_soft_value_bounds_and_shift(row, shift):
    q = np.array(row)
    v = soft_value(q)
    assert q.max() - 1e-12 <= v <= q.max() + math.log(q.size) + 1e-12
    assert soft_value(q + shift) == pytest.approx(v + shift, abs=1e-9)


def test_softmax_constant_row_is_uniform():
    assert np.allclose(softmax_policy(np.full((2, 4), 5.0)), 0.25)


def test_softmax_analytic_pair():
    assert np.allclose(softmax_policy(np.array([[0.0, math.log(3)]])), [[0.25, 0.75]], atol=1e-15)


def test_softmax_matches_direct_normalization():
    q = np.random.default_rng(0).normal(size=(3, 3))
    e = np.exp(q)
    assert np.allclose(softmax_policy(q), e / e.sum(axis=1, keepdims=True), atol=1e-15)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25)
def test_softmax_rows_are_positive_distributions(seed):
    q = np.random.default_rng(seed).normal(scale=30, size=(4, 5))
    pi = softmax_policy(q)
    assert np.all(pi > 0)
    assert np.allclose(pi.sum(axis=1), 1, atol=1e-12)


# -- soft Q iteration ---------------------------------------------------------


def test_single_state_single_action_fixed_point():
    sol = soft_q_iteration(one_state(), LINEAR, PreferenceParams(0.5, (1.0,)))
    assert sol.Q[0, 0] == pytest.approx(2.0, abs=1e-10)


def test_two_identical_actions_fixed_point():
    sol = soft_q_iteration(one_state(2), LINEAR, PreferenceParams(0.5, (1.0,)))
    assert np.allclose(sol.Q, 2 + math.log(2), atol=1e-10)
    assert sol.V[0] == pytest.approx(2 + 2 * math.log(2), abs=1e-10)


def test_fixed_point_matches_frozen_picard_oracle(small_mdp):
    mdp, truth = small_mdp
    sol = soft_q_iteration(mdp, UtilityFamily.exponential(), truth)
    # damped Picard oracle (conftest.picard_fixed_point)
    assert np.allclose(sol.Q[0], [1.4131189781751896, 1.4579926632654123, 1.4329655581022727], atol=1e-10)
    assert np.allclose(sol.Q[4], [1.1540149899030343, 1.1967898961172452, 1.0073515672733273], atol=1e-10)


def test_fixed_point_matches_live_picard_oracle():
    family = UtilityFamily.exponential()
    mdp, truth = random_mdp(3, 5, 3, family)
    q = picard_fixed_point(np.asarray(mdp.transition), mdp.utility(family, truth.theta), truth.rho)
    assert np.max(np.abs(soft_q_iteration(mdp, family, truth).Q - q)) < 1e-10


def test_solution_invariants(small_mdp):
    mdp, truth = small_mdp
    sol = soft_q_iteration(mdp, UtilityFamily.exponential(), truth, tol=1e-10)
    assert sol.converged
    assert np.allclose(sol.V, np.log(np.exp(sol.Q).sum(axis=1)), atol=1e-10)
    assert np.allclose(sol.policy.sum(axis=1), 1, atol=1e-12)
    assert np.all(sol.policy > 0)
    assert np.all(sol.Q.max(axis=1) <= sol.V)
    assert np.all(sol.V <= sol.Q.max(axis=1) + math.log(mdp.n_actions) + 1e-12)


def test_fixed_iteration_mode_runs_exactly_max_iters(small_mdp):
    mdp, truth = small_mdp
    sol = soft_q_iteration(mdp, UtilityFamily.exponential(), truth, max_iters=7, tol=0.0)
    assert sol.iterations_used == 7
    assert sol.residual > 0


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_bellman_sweep_is_rho_contraction(seed):
    family = UtilityFamily.exponential()
    mdp, truth = random_mdp(seed, 4, 3, family)
    rng = np.random.default_rng(seed)
    q1, q2 = rng.normal(scale=5, size=(2, 4, 3))
    u = mdp.utility(family, truth.theta)
    gap = np.max(np.abs(soft_bellman_sweep(mdp, u, truth.rho, q1) - soft_bellman_sweep(mdp, u, truth.rho, q2)))
    assert gap <= (truth.rho + 1e-12) * np.max(np.abs(q1 - q2))


@given(st.integers(0, 10_000), st.floats(-3, 3))
@settings(max_examples=15, deadline=None)
def test_policy_invariant_to_constant_reward_shift(seed, shift):
    mdp, truth = random_mdp(seed, 4, 3, LINEAR)
    shifted = TabularMdp(mdp.transition, np.asarray(mdp.reward_feature) + shift)
    a = soft_q_iteration(mdp, LINEAR, truth)
    b = soft_q_iteration(shifted, LINEAR, truth)
    assert np.max(np.abs(a.policy - b.policy)) < 1e-10
    expected = truth.theta[0] * shift / (1 - truth.rho)
    assert np.allclose(b.Q - a.Q, expected, atol=1e-8)


# -- transitions and occupancy -----------------------------------------------


def test_policy_transition_deterministic_chain():
    p = np.zeros((3, 2, 3))
    for s in range(3):
        p[s, 0, (s + 1) % 3] = 1
        p[s, 1, s] = 1
    mdp = TabularMdp(p, np.zeros((3, 2)))
    pt = policy_transition(mdp, np.array([[1.0, 0.0]] * 3))
    assert np.array_equal(pt, np.roll(np.eye(3), 1, axis=1))


def test_policy_transition_uniform_is_average(small_mdp):
    mdp, _ = small_mdp
    pt = policy_transition(mdp, np.full((5, 3), 1 / 3))
    assert np.allclose(pt, np.asarray(mdp.transition).mean(axis=1), atol=1e-15)


def test_policy_transition_matches_loops(small_mdp):
    mdp, _ = small_mdp
    pi = softmax_policy(np.random.default_rng(1).normal(size=(5, 3)))
    pt = policy_transition(mdp, pi)
    assert np.allclose(pt, loop_policy_transition(np.asarray(mdp.transition), pi), atol=1e-15)
    assert np.allclose(pt.sum(axis=1), 1, atol=1e-12)


def test_occupancy_single_absorbing_state():
    occ = discounted_occupancy(one_state(), np.ones((1, 1)), 0.5, np.ones(1))
    assert occ.state_occupancy[0] == pytest.approx(2.0, abs=1e-12)


def test_occupancy_two_state_swap():
    p = np.array([[[0.0, 1.0]], [[1.0, 0.0]]])
    occ = discounted_occupancy(TabularMdp(p, np.zeros((2, 1))), np.ones((2, 1)), 0.5, np.array([1.0, 0.0]))
    assert np.allclose(occ.state_occupancy, [4 / 3, 2 / 3], atol=1e-12)


def test_occupancy_matches_frozen_power_series(small_mdp):
    mdp, _ = small_mdp
    occ = discounted_occupancy(mdp, np.full((5, 3), 1 / 3), 0.6)
    frozen = [0.485561159994641, 0.4945050926619324, 0.49267483079248875, 0.5482818860030524, 0.47897703054788543]
    assert np.allclose(occ.state_occupancy, frozen, atol=1e-9)


@given(st.integers(0, 10_000), st.sampled_from([0.3, 0.6, 0.95]))
@settings(max_examples=15, deadline=None)
def test_occupancy_properties(seed, gamma):
    mdp, _ = random_mdp(seed, 6, 3)
    rng = np.random.default_rng(seed)
    pi = softmax_policy(rng.normal(size=(6, 3)))
    mu = rng.dirichlet(np.ones(6))
    occ = discounted_occupancy(mdp, pi, gamma, mu)
    assert occ.expect(np.ones(6)) == pytest.approx(1 / (1 - gamma), abs=1e-9)
    assert np.all(occ.state_occupancy >= 0)
    oracle = power_series_occupancy(policy_transition(mdp, pi), gamma, mu)
    assert np.max(np.abs(occ.state_occupancy - oracle)) < 1e-9


# -- validation ---------------------------------------------------------------


def test_mdp_rejects_bad_rows():
    with pytest.raises(InvalidArgumentError):
        TabularMdp(np.full((1, 1, 2), 0.6), np.zeros((1, 1)))


def test_mdp_arrays_are_read_only(small_mdp):
    mdp, _ = small_mdp
    with pytest.raises(ValueError):
        mdp.transition[0, 0, 0] = 1.0


@pytest.mark.parametrize("rho", [0.0, 1.0, -0.1])
def test_params_reject_rho_outside_unit_interval(rho):
    with pytest.raises(InvalidArgumentError):
        PreferenceParams(rho, (1.0,))


def test_params_vector_round_trip():
    p = PreferenceParams(0.3, (3.0, 2.0))
    assert np.array_equal(p.as_vector(), [3.0, 2.0, 0.3])
    assert PreferenceParams.from_vector(p.as_vector()) == p


def test_power2_derivatives_match_finite_differences():
    fam = UtilityFamily.power2()
    f = np.array([[[0.7, 0.4]]])
    th = np.array([2.5, 1.5])
    h = 1e-6
    g = fam.grad(f, th)[0, 0]
    fd = [(fam.value(f, th + e) - fam.value(f, th - e))[0, 0] / (2 * h) for e in np.eye(2) * h]
    assert np.allclose(g, fd, rtol=1e-7)
    hs = fam.hess(f, th)[0, 0]
    fdh = [(fam.grad(f, th + e) - fam.grad(f, th - e))[0, 0] / (2 * h) for e in np.eye(2) * h]
    assert np.allclose(hs, np.array(fdh), rtol=1e-6)
