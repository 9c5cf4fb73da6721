import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import suite_instance
from prefinfer.envs import random_mdp
from prefinfer.errors import ConvergenceWarning, PreconditionError
from prefinfer.likelihood import (
    evaluate,
    finite_diff_gradient,
    finite_diff_hessian,
    grad_likelihood,
    grad_likelihood_direct,
    grad_q_tables,
    hessian_at_truth,
    log_likelihood,
    log_likelihood_decomposed,
    monte_carlo_log_likelihood,
)
from prefinfer.regmdp import PreferenceParams, TabularMdp, UtilityFamily, soft_q_iteration

EXP = UtilityFamily.exponential()
LINEAR = UtilityFamily.linear()
TIGHT = {"max_iters": 100_000, "tol": 1e-13}


def single_action_mdp(n_states=3, seed=0):
    rng = np.random.default_rng(seed)
    p = rng.random((n_states, 1, n_states))
    p /= p.sum(axis=2, keepdims=True)
    return TabularMdp(p, rng.random((n_states, 1)))


def behavior(mdp, family, truth):
    return soft_q_iteration(mdp, family, truth, **TIGHT).policy


def rel_err(a, b):
    return np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(b), 1e-8)


# -- likelihood values --------------------------------------------------------


def test_uniform_model_policy_likelihood():
    # zero features: every Q row is constant, so pi is uniform over 2 actions
    p = np.full((2, 2, 2), 0.5)
    mdp = TabularMdp(p, np.zeros((2, 2)))
    params = PreferenceParams(0.4, (1.3,))
    pi = soft_q_iteration(mdp, LINEAR, params).policy
    assert log_likelihood(mdp, LINEAR, pi, params, 0.5) == pytest.approx(-2 * math.log(2), abs=1e-12)


def test_single_action_likelihood_is_zero():
    mdp = single_action_mdp()
    assert log_likelihood(mdp, EXP, np.ones((3, 1)), PreferenceParams(0.7, (2.0,)), 0.6) == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_decomposed_form_agrees(seed):
    mdp, family, truth = suite_instance(seed)
    pi_b = behavior(mdp, family, truth)
    params = PreferenceParams(0.5, tuple(np.asarray(truth.theta) * 0.8))
    a = log_likelihood(mdp, family, pi_b, params, 0.6, **TIGHT)
    b = log_likelihood_decomposed(mdp, family, pi_b, params, 0.6, **TIGHT)
    assert a == pytest.approx(b, abs=1e-8)


def test_monte_carlo_agrees_within_three_standard_errors(small_mdp):
    mdp, truth = small_mdp
    pi_b = behavior(mdp, EXP, truth)
    params = PreferenceParams(0.5, (1.0,))
    exact = log_likelihood(mdp, EXP, pi_b, params, 0.6)
    mean, se = monte_carlo_log_likelihood(mdp, EXP, pi_b, params, 0.6, n_traj=100_000, seed=1)
    assert abs(mean - exact) < 3 * se


def test_unconverged_solve_warns(small_mdp):
    mdp, truth = small_mdp
    with pytest.warns(ConvergenceWarning):
        log_likelihood(mdp, EXP, behavior(mdp, EXP, truth), truth, 0.6, max_iters=2, tol=1e-10)


# -- Q/V derivatives ----------------------------------------------------------


def test_grad_theta_q_single_state_linear():
    mdp = TabularMdp(np.ones((1, 1, 1)), np.ones((1, 1)))
    params = PreferenceParams(0.5, (1.0,))
    bundle = grad_q_tables(mdp, LINEAR, params, soft_q_iteration(mdp, LINEAR, params))
    assert bundle.grad_theta_Q[0, 0, 0] == pytest.approx(2.0, abs=1e-12)


def test_grad_rho_q_single_state():
    mdp = TabularMdp(np.ones((1, 1, 1)), np.ones((1, 1)))
    params = PreferenceParams(0.5, (1.0,))
    bundle = grad_q_tables(mdp, LINEAR, params, soft_q_iteration(mdp, LINEAR, params))
    assert bundle.grad_rho_Q[0, 0] == pytest.approx(4.0, abs=1e-9)


@pytest.mark.parametrize("family", [EXP, LINEAR, UtilityFamily.power2()], ids=lambda f: f.family_id)
def test_q_derivatives_match_finite_differences(family):
    mdp, truth = random_mdp(11, 5, 3, family)
    sol = soft_q_iteration(mdp, family, truth, **TIGHT)
    bundle = grad_q_tables(mdp, family, truth, sol)
    x = truth.as_vector()
    h = 1e-5
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        qp = soft_q_iteration(mdp, family, PreferenceParams.from_vector(x + e), **TIGHT).Q
        qm = soft_q_iteration(mdp, family, PreferenceParams.from_vector(x - e), **TIGHT).Q
        assert rel_err(bundle.stacked_Q[..., i], (qp - qm) / (2 * h)) < 1e-5
    # V-parts are policy averages of Q-parts
    assert np.allclose(bundle.grad_theta_V, np.einsum("sa,sad->sd", sol.policy, bundle.grad_theta_Q), atol=1e-9)
    assert np.allclose(bundle.grad_rho_V, np.sum(sol.policy * bundle.grad_rho_Q, axis=1), atol=1e-9)


# -- gradient of L ------------------------------------------------------------


@pytest.mark.parametrize("gamma", [0.4, 0.6, 0.9])
@pytest.mark.parametrize("seed", range(4))
def test_stationary_at_truth(seed, gamma):
    mdp, family, truth = suite_instance(seed)
    g_theta, g_rho = grad_likelihood(mdp, family, behavior(mdp, family, truth), truth, gamma, **TIGHT)
    assert np.linalg.norm(np.append(g_theta, g_rho)) < 1e-7


def test_single_action_gradient_is_zero():
    mdp = single_action_mdp()
    g_theta, g_rho = grad_likelihood(mdp, EXP, np.ones((3, 1)), PreferenceParams(0.4, (1.5,)), 0.6)
    assert np.all(g_theta == 0) and g_rho == 0


@pytest.mark.parametrize("seed", range(6))
def test_gradient_matches_finite_differences(seed):
    mdp, family, truth = suite_instance(seed)
    pi_b = behavior(mdp, family, truth)
    params = PreferenceParams.from_vector(truth.as_vector() + np.array([0.3] * family.dim_theta + [-0.1]))
    analytic = evaluate(mdp, family, pi_b, params, 0.6, **TIGHT).grad
    fd = finite_diff_gradient(lambda p: log_likelihood(mdp, family, pi_b, p, 0.6, **TIGHT), params, 1e-5, family)
    assert rel_err(analytic, fd) < 1e-5


@pytest.mark.parametrize("seed", range(3))
def test_three_term_and_direct_forms_agree(seed):
    mdp, family, truth = suite_instance(seed)
    pi_b = behavior(mdp, family, truth)
    params = PreferenceParams(0.45, tuple(np.asarray(truth.theta) + 0.4))
    a = evaluate(mdp, family, pi_b, params, 0.7, **TIGHT).grad
    b = grad_likelihood_direct(mdp, family, pi_b, params, 0.7, **TIGHT)
    assert np.allclose(a, b, atol=1e-9)


def test_power_family_gradient_matches_finite_differences():
    family = UtilityFamily.power2()
    mdp, truth = random_mdp(2, 6, 4, family)
    pi_b = behavior(mdp, family, truth)
    params = PreferenceParams(truth.rho + 0.05, tuple(np.asarray(truth.theta) - 0.2))
    analytic = evaluate(mdp, family, pi_b, params, 0.6, **TIGHT).grad
    fd = finite_diff_gradient(lambda p: log_likelihood(mdp, family, pi_b, p, 0.6, **TIGHT), params, 1e-5, family)
    assert rel_err(analytic, fd) < 1e-5


# -- Hessian ------------------------------------------------------------------


def test_single_action_hessian_is_zero():
    h = hessian_at_truth(single_action_mdp(), EXP, PreferenceParams(0.4, (1.5,)), 0.6)
    assert np.all(h.H == 0)


@given(st.integers(0, 5000), st.sampled_from([0.4, 0.6, 0.9]))
@settings(max_examples=20, deadline=None)
def test_hessian_is_symmetric_nsd(seed, gamma):
    mdp, family, truth = suite_instance(seed)
    h = hessian_at_truth(mdp, family, truth, gamma)
    assert np.allclose(h.H, h.H.T, atol=1e-9)
    assert h.is_nsd


def test_hessian_matches_second_differences():
    mdp, truth = random_mdp(5, 4, 3, EXP)
    pi_b = behavior(mdp, EXP, truth)
    h = hessian_at_truth(mdp, EXP, truth, 0.6, **TIGHT).H
    fd = finite_diff_hessian(lambda p: log_likelihood(mdp, EXP, pi_b, p, 0.6, **TIGHT), truth, 1e-3, EXP)
    assert np.max(np.abs(h - fd)) < 1e-4


def test_truth_is_local_maximum():
    mdp, truth = random_mdp(8, 5, 3, EXP)
    pi_b = behavior(mdp, EXP, truth)
    best = log_likelihood(mdp, EXP, pi_b, truth, 0.6, **TIGHT)
    rng = np.random.default_rng(0)
    for _ in range(100):
        step = rng.normal(size=2)
        step *= rng.uniform(0, 0.1) / np.linalg.norm(step)
        p = PreferenceParams.from_vector(truth.as_vector() + step)
        assert log_likelihood(mdp, EXP, pi_b, p, 0.6, **TIGHT) <= best + 1e-12


# -- finite-difference oracle -------------------------------------------------


def test_finite_diff_of_square():
    g = finite_diff_gradient(lambda p: p.rho**2, PreferenceParams(0.3, (1.0,)), 1e-5)
    assert g[-1] == pytest.approx(0.6, abs=1e-9)
    assert g[0] == 0


def test_finite_diff_of_constant_is_zero():
    g = finite_diff_gradient(lambda p: 4.2, PreferenceParams(0.3, (1.0, 2.0)), 1e-5)
    assert np.all(g == 0)


def test_finite_diff_rejects_boundary():
    with pytest.raises(PreconditionError):
        finite_diff_gradient(lambda p: 0.0, PreferenceParams(1e-6, (1.0,)), 1e-5)
    with pytest.raises(PreconditionError):
        finite_diff_gradient(lambda p: 0.0, PreferenceParams(0.5, (1e-6,)), 1e-5, EXP)


def test_no_warning_at_default_tolerance(small_mdp):
    mdp, truth = small_mdp
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        evaluate(mdp, EXP, behavior(mdp, EXP, truth), truth, 0.6)
