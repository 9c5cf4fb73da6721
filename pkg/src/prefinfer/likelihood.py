"""Discounted log-likelihood of a demonstrated policy and its derivatives.

The inference agent weights log-probabilities by its own discount ``gamma``,
which need not equal the client's ``rho``. All trajectory expectations are
evaluated exactly through discounted occupancy measures of the behavior
policy; derivatives of ``Q`` come from linear solves against ``I - rho P_pi``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConvergenceWarning, InvalidArgumentError, NumericError, PreconditionError
from .regmdp import (
    PreferenceParams,
    SoftSolution,
    TabularMdp,
    UtilityFamily,
    discounted_occupancy,
    policy_transition,
    sample_trajectories,
    soft_q_iteration,
    uniform_distribution,
)


@dataclass(frozen=True, eq=False)
class GradientBundle:
    grad_theta_Q: np.ndarray  # (S, A, d)
    grad_rho_Q: np.ndarray  # (S, A)
    grad_theta_V: np.ndarray  # (S, d)
    grad_rho_V: np.ndarray  # (S,)
    grad_theta_L: Optional[np.ndarray] = None
    grad_rho_L: Optional[float] = None

    @property
    def stacked_Q(self) -> np.ndarray:
        """``(S, A, d + 1)`` array of ``(grad_theta Q, grad_rho Q)``."""
        return np.concatenate([self.grad_theta_Q, self.grad_rho_Q[..., None]], axis=-1)

    @property
    def grad_L(self) -> np.ndarray:
        return np.append(self.grad_theta_L, self.grad_rho_L)


@dataclass(frozen=True, eq=False)
class HessianAtTruth:
    H: np.ndarray
    max_eigenvalue: float

    @property
    def spectral_norm(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvalsh(self.H)))) if self.H.size else 0.0

    @property
    def is_nsd(self) -> bool:
        return self.max_eigenvalue <= 1e-7 * (1.0 + self.spectral_norm)


@dataclass(frozen=True, eq=False)
class LikelihoodEval:
    """Log-likelihood, its gradient and the model solution at one parameter point."""

    params: PreferenceParams
    value: float
    bundle: GradientBundle
    solution: SoftSolution

    @property
    def grad(self) -> np.ndarray:
        return self.bundle.grad_L


def _solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        x = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise NumericError("linear solve for Q derivatives failed") from exc
    if not np.all(np.isfinite(x)):
        raise NumericError("linear solve for Q derivatives returned non-finite values")
    return x


def _check_behavior(mdp: TabularMdp, behavior_policy) -> np.ndarray:
    pi = np.asarray(behavior_policy, dtype=float)
    if pi.shape != (mdp.n_states, mdp.n_actions):
        raise InvalidArgumentError("behavior policy must have shape (S, A)")
    if np.any(pi < 0) or np.max(np.abs(pi.sum(axis=1) - 1.0)) > 1e-10:
        raise InvalidArgumentError("behavior policy rows must be probability vectors")
    return pi


def _check_gamma(gamma: float) -> None:
    if not (0.0 < gamma < 1.0):
        raise InvalidArgumentError("gamma must lie in (0, 1)")


def _solve_params(mdp, family, params, max_iters, tol) -> SoftSolution:
    sol = soft_q_iteration(mdp, family, params, max_iters=max_iters, tol=tol)
    if tol > 0 and sol.residual >= tol:
        warnings.warn(
            f"soft Q residual {sol.residual:.3e} above tol {tol:.1e} at {params}",
            ConvergenceWarning,
            stacklevel=3,
        )
    return sol


def grad_q_tables(
    mdp: TabularMdp, family: UtilityFamily, params: PreferenceParams, solution: SoftSolution
) -> GradientBundle:
    """First derivatives of the soft fixed point ``Q`` and ``V`` in ``theta`` and ``rho``.

    With ``P_pi`` the state kernel of the model policy, the V-parts solve
    ``(I - rho P_pi) dV = sum_a pi * source`` where the source is
    ``grad_theta U`` for theta and ``E[V(s')]`` for rho; Q-parts follow from
    one more Bellman backup.
    """
    theta = family.check_theta(params.theta)
    rho = params.rho
    p = mdp.transition
    pi = solution.policy
    p_pi = policy_transition(mdp, pi)
    a = np.eye(mdp.n_states) - rho * p_pi

    du = family.grad(family.check_features(mdp.reward_feature), theta)  # (S, A, d)
    dv_theta = _solve(a, np.einsum("sa,sad->sd", pi, du))
    dq_theta = du + rho * np.einsum("sat,td->sad", p, dv_theta)

    next_v = p @ solution.V  # (S, A)
    dv_rho = _solve(a, np.einsum("sa,sa->s", pi, next_v))
    dq_rho = next_v + rho * (p @ dv_rho)
    return GradientBundle(grad_theta_Q=dq_theta, grad_rho_Q=dq_rho, grad_theta_V=dv_theta, grad_rho_V=dv_rho)


def evaluate(
    mdp: TabularMdp,
    family: UtilityFamily,
    behavior_policy,
    params: PreferenceParams,
    gamma: float,
    mu=None,
    *,
    max_iters: int = 10_000,
    tol: float = 1e-10,
) -> LikelihoodEval:
    """Likelihood and its full gradient with a single soft Q solve."""
    _check_gamma(gamma)
    pi_b = _check_behavior(mdp, behavior_policy)
    if mu is None:
        mu = uniform_distribution(mdp.n_states)
    theta = family.check_theta(params.theta)
    sol = _solve_params(mdp, family, params, max_iters, tol)
    bundle = grad_q_tables(mdp, family, params, sol)

    occ = discounted_occupancy(mdp, pi_b, gamma, mu)
    d = occ.state_occupancy
    # discounted occupancy of s_t for t >= 1 with weight gamma^(t-1)
    d_next = d @ policy_transition(mdp, pi_b)
    mu = occ.initial_distribution

    log_pi = sol.Q - sol.V[:, None]
    value = float(d @ np.sum(pi_b * log_pi, axis=1))

    du = family.grad(family.check_features(mdp.reward_feature), theta)
    lag = params.rho - gamma
    grad_theta = (
        d @ np.einsum("sa,sad->sd", pi_b, du)
        - mu @ bundle.grad_theta_V
        + lag * (d_next @ bundle.grad_theta_V)
    )
    grad_rho = float(d_next @ sol.V - mu @ bundle.grad_rho_V + lag * (d_next @ bundle.grad_rho_V))
    if mdp.n_actions == 1:
        # log pi is identically 0; skip the rounding residue of the three terms
        grad_theta, grad_rho = np.zeros_like(grad_theta), 0.0
    full = GradientBundle(
        grad_theta_Q=bundle.grad_theta_Q,
        grad_rho_Q=bundle.grad_rho_Q,
        grad_theta_V=bundle.grad_theta_V,
        grad_rho_V=bundle.grad_rho_V,
        grad_theta_L=np.asarray(grad_theta, dtype=float),
        grad_rho_L=grad_rho,
    )
    return LikelihoodEval(params=params, value=value, bundle=full, solution=sol)


def log_likelihood(
    mdp: TabularMdp,
    family: UtilityFamily,
    behavior_policy,
    params: PreferenceParams,
    gamma: float,
    mu=None,
    *,
    max_iters: int = 10_000,
    tol: float = 1e-10,
) -> float:
    """``E_{tau ~ behavior}[sum_t gamma^t log pi_{rho,theta}(a_t|s_t)]``.

    The params-independent transition term of the trajectory likelihood is
    dropped. A ``ConvergenceWarning`` is emitted if the inner solve misses
    ``tol``.
    """
    _check_gamma(gamma)
    pi_b = _check_behavior(mdp, behavior_policy)
    sol = _solve_params(mdp, family, params, max_iters, tol)
    occ = discounted_occupancy(mdp, pi_b, gamma, mu)
    log_pi = sol.Q - sol.V[:, None]
    return float(occ.state_occupancy @ np.sum(pi_b * log_pi, axis=1))


def log_likelihood_decomposed(
    mdp: TabularMdp,
    family: UtilityFamily,
    behavior_policy,
    params: PreferenceParams,
    gamma: float,
    mu=None,
    *,
    max_iters: int = 10_000,
    tol: float = 1e-10,
) -> float:
    """The same likelihood written as utility, initial-value and lagged-value terms."""
    _check_gamma(gamma)
    pi_b = _check_behavior(mdp, behavior_policy)
    sol = _solve_params(mdp, family, params, max_iters, tol)
    occ = discounted_occupancy(mdp, pi_b, gamma, mu)
    d = occ.state_occupancy
    d_next = d @ policy_transition(mdp, pi_b)
    u = mdp.utility(family, params.theta)
    return float(
        d @ np.sum(pi_b * u, axis=1)
        - occ.initial_distribution @ sol.V
        + (params.rho - gamma) * (d_next @ sol.V)
    )


def grad_likelihood(
    mdp: TabularMdp,
    family: UtilityFamily,
    behavior_policy,
    params: PreferenceParams,
    gamma: float,
    mu=None,
    **solver,
) -> tuple[np.ndarray, float]:
    """``(grad_theta L, grad_rho L)`` at ``params``."""
    ev = evaluate(mdp, family, behavior_policy, params, gamma, mu, **solver)
    return ev.bundle.grad_theta_L, ev.bundle.grad_rho_L


def grad_likelihood_direct(
    mdp: TabularMdp,
    family: UtilityFamily,
    behavior_policy,
    params: PreferenceParams,
    gamma: float,
    mu=None,
    **solver,
) -> np.ndarray:
    """Gradient as ``sum_s d(s) sum_a (pi_b - pi)(a|s) grad Q(s, a)``; vector ``(theta..., rho)``."""
    pi_b = _check_behavior(mdp, behavior_policy)
    sol = _solve_params(mdp, family, params, solver.get("max_iters", 10_000), solver.get("tol", 1e-10))
    bundle = grad_q_tables(mdp, family, params, sol)
    d = discounted_occupancy(mdp, pi_b, gamma, mu).state_occupancy
    return np.einsum("s,sa,sak->k", d, pi_b - sol.policy, bundle.stacked_Q)


def hessian_at_truth(
    mdp: TabularMdp,
    family: UtilityFamily,
    truth: PreferenceParams,
    gamma: float,
    mu=None,
    *,
    max_iters: int = 10_000,
    tol: float = 1e-10,
) -> HessianAtTruth:
    """Hessian of ``L`` at the client's parameters, blocked ``[theta..., rho]``.

    When the demonstrated policy is the model policy itself the second
    derivatives of ``Q`` cancel, leaving minus the occupancy-weighted per-state
    covariance of ``(grad_theta Q, grad_rho Q)`` under that policy.
    """
    _check_gamma(gamma)
    sol = _solve_params(mdp, family, truth, max_iters, tol)
    bundle = grad_q_tables(mdp, family, truth, sol)
    pi = sol.policy
    d = discounted_occupancy(mdp, pi, gamma, mu).state_occupancy
    g = bundle.stacked_Q
    centered = g - np.einsum("sa,sak->sk", pi, g)[:, None, :]
    cov = np.einsum("sa,saj,sak->sjk", pi, centered, centered)
    h = -np.einsum("s,sjk->jk", d, cov)
    h = 0.5 * (h + h.T)
    max_eig = float(np.max(np.linalg.eigvalsh(h)))
    return HessianAtTruth(H=h, max_eigenvalue=max_eig)


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------


def _check_interior(params: PreferenceParams, step: float, family: Optional[UtilityFamily]) -> np.ndarray:
    if not step > 0:
        raise PreconditionError("finite-difference step must be positive")
    x = params.as_vector()
    if not (x[-1] - step > 0.0 and x[-1] + step < 1.0):
        raise PreconditionError(f"rho={x[-1]} is within {step} of the (0, 1) boundary")
    if family is not None:
        lo, hi = np.asarray(family.lower), np.asarray(family.upper)
        if np.any(x[:-1] - step <= lo) or np.any(x[:-1] + step >= hi):
            raise PreconditionError(f"theta={x[:-1].tolist()} is within {step} of its domain boundary")
    return x


def finite_diff_gradient(
    fn: Callable[[PreferenceParams], float],
    params: PreferenceParams,
    step: float = 1e-5,
    family: Optional[UtilityFamily] = None,
) -> np.ndarray:
    """Central differences of ``fn`` in each coordinate of ``(theta..., rho)``."""
    x = _check_interior(params, step, family)
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        out[i] = (fn(PreferenceParams.from_vector(x + e)) - fn(PreferenceParams.from_vector(x - e))) / (2 * step)
    return out


def finite_diff_hessian(
    fn: Callable[[PreferenceParams], float],
    params: PreferenceParams,
    step: float = 1e-3,
    family: Optional[UtilityFamily] = None,
) -> np.ndarray:
    """Second-order central differences of ``fn`` in ``(theta..., rho)``."""
    x = _check_interior(params, step, family)
    n = x.size
    f = lambda v: fn(PreferenceParams.from_vector(v))  # noqa: E731
    f0 = f(x)
    h = np.empty((n, n))
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = step
        h[i, i] = (f(x + ei) - 2 * f0 + f(x - ei)) / step**2
        for j in range(i):
            ej = np.zeros(n)
            ej[j] = step
            h[i, j] = h[j, i] = (
                f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)
            ) / (4 * step**2)
    return h


def monte_carlo_log_likelihood(
    mdp: TabularMdp,
    family: UtilityFamily,
    behavior_policy,
    params: PreferenceParams,
    gamma: float,
    mu=None,
    *,
    n_traj: int = 100_000,
    seed: int = 0,
    truncation: float = 1e-12,
    tol: float = 1e-10,
) -> tuple[float, float]:
    """Sampled estimate of the likelihood and its standard error.

    Trajectories are truncated at the first ``T`` with ``gamma**T < truncation``.
    """
    _check_gamma(gamma)
    pi_b = _check_behavior(mdp, behavior_policy)
    if mu is None:
        mu = uniform_distribution(mdp.n_states)
    sol = soft_q_iteration(mdp, family, params, tol=tol)
    log_pi = sol.Q - sol.V[:, None]
    horizon = int(math.ceil(math.log(truncation) / math.log(gamma)))
    rng = np.random.default_rng(seed)
    states, actions = sample_trajectories(mdp, pi_b, mu, horizon, n_traj, rng)
    weights = gamma ** np.arange(horizon + 1)
    returns = (log_pi[states, actions] * weights).sum(axis=1)
    return float(returns.mean()), float(returns.std(ddof=1) / math.sqrt(n_traj))
