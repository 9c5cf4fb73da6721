"""Tabular entropy-regularized MDPs and their exact solution machinery.

Everything here works on dense numpy tables:

* ``transition[s, a, s']`` is the kernel ``P(s'|s, a)``;
* ``reward_feature[s, a, ...]`` is the raw input fed to a utility family;
* ``Q[s, a]``, ``V[s]`` and ``policy[s, a]`` are the soft solution tables.

Log-sum-exp is always evaluated with max subtraction because soft values grow
like ``1 / (1 - rho)``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConvergenceWarning, InvalidArgumentError, NumericError

FAMILIES = ("exponential", "power2", "linear")


def _frozen(array, dtype=float) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


# ---------------------------------------------------------------------------
# utility families
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UtilityFamily:
    """A parametric utility ``U_theta`` together with its theta-derivatives.

    ``exponential``: ``1 - exp(-theta x)`` on scalar features, ``theta > 0``.
    ``power2``: ``x**t1 * y**t2 / (t1 * t2)`` on strictly positive feature
    pairs ``(x, y)``, ``t1, t2 > 0``.
    ``linear``: ``theta . x`` on feature vectors of length ``dim_theta``.
    """

    family_id: str
    dim_theta: int = 1
    lower: tuple = ()
    upper: tuple = ()

    def __post_init__(self):
        if self.family_id not in FAMILIES:
            raise InvalidArgumentError(f"unknown utility family {self.family_id!r}")
        if self.family_id == "exponential" and self.dim_theta != 1:
            raise InvalidArgumentError("exponential family has dim_theta = 1")
        if self.family_id == "power2" and self.dim_theta != 2:
            raise InvalidArgumentError("power2 family has dim_theta = 2")
        if self.dim_theta < 1:
            raise InvalidArgumentError("dim_theta must be positive")
        if not self.lower:
            lo = 0.0 if self.family_id != "linear" else -np.inf
            object.__setattr__(self, "lower", (lo,) * self.dim_theta)
        if not self.upper:
            object.__setattr__(self, "upper", (np.inf,) * self.dim_theta)
        if len(self.lower) != self.dim_theta or len(self.upper) != self.dim_theta:
            raise InvalidArgumentError("domain bounds must have length dim_theta")

    @classmethod
    def exponential(cls) -> "UtilityFamily":
        return cls("exponential", 1)

    @classmethod
    def power2(cls) -> "UtilityFamily":
        return cls("power2", 2)

    @classmethod
    def linear(cls, dim: int = 1) -> "UtilityFamily":
        return cls("linear", dim)

    @property
    def feature_dim(self) -> int:
        """Trailing feature axis length (0 for scalar features)."""
        if self.family_id == "exponential":
            return 0
        if self.family_id == "power2":
            return 2
        return self.dim_theta

    def contains(self, theta) -> bool:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim_theta,) or not np.all(np.isfinite(theta)):
            return False
        return bool(np.all(theta > np.asarray(self.lower)) and np.all(theta < np.asarray(self.upper)))

    def check_theta(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if not self.contains(theta):
            raise InvalidArgumentError(
                f"theta={theta.tolist()} outside the {self.family_id} domain "
                f"{list(zip(self.lower, self.upper))}"
            )
        return theta

    def check_features(self, features) -> np.ndarray:
        features = np.asarray(features, dtype=float)
        fd = self.feature_dim
        if self.family_id == "linear" and fd == 1 and features.ndim == 2:
            features = features[..., None]
        if fd == 0 and features.ndim != 2:
            raise InvalidArgumentError("scalar family expects features of shape (S, A)")
        if fd and (features.ndim != 3 or features.shape[-1] != fd):
            raise InvalidArgumentError(f"{self.family_id} expects features of shape (S, A, {fd})")
        if not np.all(np.isfinite(features)):
            raise InvalidArgumentError("reward features must be finite")
        if self.family_id == "power2" and np.any(features <= 0):
            raise InvalidArgumentError("power2 features must be strictly positive")
        return features

    def value(self, features, theta) -> np.ndarray:
        """``U_theta(features)``; shape ``(S, A)``."""
        theta = np.asarray(theta, dtype=float).reshape(-1)
        f = np.asarray(features, dtype=float)
        if self.family_id == "exponential":
            return 1.0 - np.exp(-theta[0] * f)
        if self.family_id == "power2":
            t1, t2 = theta
            return np.exp(t1 * np.log(f[..., 0]) + t2 * np.log(f[..., 1])) / (t1 * t2)
        if f.ndim == 2:
            f = f[..., None]
        return f @ theta

    def grad(self, features, theta) -> np.ndarray:
        """theta-gradient, shape ``(S, A, d)``."""
        theta = np.asarray(theta, dtype=float).reshape(-1)
        f = np.asarray(features, dtype=float)
        if self.family_id == "exponential":
            return (f * np.exp(-theta[0] * f))[..., None]
        if self.family_id == "power2":
            u = self.value(f, theta)
            lx = np.log(f[..., 0]) - 1.0 / theta[0]
            ly = np.log(f[..., 1]) - 1.0 / theta[1]
            return np.stack([u * lx, u * ly], axis=-1)
        if f.ndim == 2:
            f = f[..., None]
        return np.array(f, copy=True)

    def hess(self, features, theta) -> np.ndarray:
        """theta-Hessian, shape ``(S, A, d, d)``."""
        theta = np.asarray(theta, dtype=float).reshape(-1)
        f = np.asarray(features, dtype=float)
        if self.family_id == "exponential":
            return (-(f ** 2) * np.exp(-theta[0] * f))[..., None, None]
        if self.family_id == "power2":
            u = self.value(f, theta)
            l = np.stack(
                [np.log(f[..., 0]) - 1.0 / theta[0], np.log(f[..., 1]) - 1.0 / theta[1]], axis=-1
            )
            h = l[..., :, None] * l[..., None, :]
            h[..., 0, 0] += 1.0 / theta[0] ** 2
            h[..., 1, 1] += 1.0 / theta[1] ** 2
            return u[..., None, None] * h
        shape = f.shape[:2] + (self.dim_theta, self.dim_theta)
        return np.zeros(shape)


# ---------------------------------------------------------------------------
# core types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Finite MDP with kernel ``P[s, a, s']`` and reward features ``f[s, a, ...]``."""

    transition: np.ndarray
    reward_feature: np.ndarray
    labels: Optional[dict] = field(default=None, compare=False)

    def __post_init__(self):
        p = _frozen(self.transition)
        f = _frozen(self.reward_feature)
        if p.ndim != 3 or p.shape[0] < 1 or p.shape[1] < 1 or p.shape[0] != p.shape[2]:
            raise InvalidArgumentError("transition must have shape (S, A, S)")
        if f.shape[:2] != p.shape[:2]:
            raise InvalidArgumentError("reward_feature must have leading shape (S, A)")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise InvalidArgumentError("transition probabilities must be finite and nonnegative")
        rowsum = p.sum(axis=2)
        if np.max(np.abs(rowsum - 1.0)) > 1e-12:
            raise InvalidArgumentError(
                f"transition rows must sum to 1 (worst deviation {np.max(np.abs(rowsum - 1.0)):.3e})"
            )
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "reward_feature", f)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def utility(self, family: UtilityFamily, theta) -> np.ndarray:
        return family.value(family.check_features(self.reward_feature), theta)


@dataclass(frozen=True)
class PreferenceParams:
    """Discount factor ``rho`` in (0, 1) and utility parameters ``theta``.

    The flat vector form used by gradients and Hessians is ``(theta..., rho)``.
    """

    rho: float
    theta: tuple

    def __post_init__(self):
        theta = tuple(float(t) for t in np.atleast_1d(np.asarray(self.theta, dtype=float)))
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "rho", float(self.rho))
        if not (0.0 < self.rho < 1.0):
            raise InvalidArgumentError(f"rho={self.rho} must lie in (0, 1)")
        if not all(np.isfinite(theta)):
            raise InvalidArgumentError("theta must be finite")

    @property
    def theta_array(self) -> np.ndarray:
        return np.array(self.theta)

    def as_vector(self) -> np.ndarray:
        return np.array(self.theta + (self.rho,))

    @classmethod
    def from_vector(cls, vec) -> "PreferenceParams":
        vec = np.asarray(vec, dtype=float)
        return cls(rho=vec[-1], theta=tuple(vec[:-1]))


@dataclass(frozen=True, eq=False)
class SoftSolution:
    Q: np.ndarray
    V: np.ndarray
    policy: np.ndarray
    residual: float
    iterations_used: int
    tol: float = 0.0

    @property
    def converged(self) -> bool:
        return self.residual < self.tol if self.tol > 0 else True


@dataclass(frozen=True, eq=False)
class OccupancyMeasure:
    discount: float
    state_occupancy: np.ndarray
    initial_distribution: np.ndarray

    def expect(self, g) -> float:
        """``E[sum_t discount^t g(s_t)]`` for a per-state function ``g``."""
        return float(self.state_occupancy @ np.asarray(g, dtype=float))


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def soft_value(q) -> np.ndarray:
    """Log-sum-exp over the last axis, ``m + log sum exp(q - m)``."""
    q = np.asarray(q, dtype=float)
    if q.size == 0 or not np.all(np.isfinite(q)):
        raise InvalidArgumentError("soft_value needs a non-empty finite input")
    m = q.max(axis=-1)
    out = m + np.log(np.exp(q - m[..., None]).sum(axis=-1))
    return out if out.ndim else float(out)


def softmax_policy(q_table) -> np.ndarray:
    """Row-wise softmax ``exp(Q(s, a) - V(s))``."""
    q = np.asarray(q_table, dtype=float)
    if not np.all(np.isfinite(q)):
        raise InvalidArgumentError("Q table must be finite")
    z = q - q.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def soft_bellman_sweep(mdp: TabularMdp, utility: np.ndarray, rho: float, q: np.ndarray) -> np.ndarray:
    """One application of ``Q <- U + rho * E[V(s')]`` with the soft value of ``q``."""
    return utility + rho * (mdp.transition @ soft_value(q))


def soft_q_iteration(
    mdp: TabularMdp,
    family: UtilityFamily,
    params: PreferenceParams,
    max_iters: int = 10_000,
    tol: float = 1e-10,
    warn: bool = False,
) -> SoftSolution:
    """Picard iteration of the soft Bellman operator from ``Q = 1 / (1 - rho)``.

    Stops after ``max_iters`` sweeps or once the sup-norm update falls below
    ``tol``; ``tol=0`` runs exactly ``max_iters`` sweeps. Not reaching ``tol``
    is reported through ``residual`` rather than raised.
    """
    if max_iters < 1:
        raise InvalidArgumentError("max_iters must be >= 1")
    theta = family.check_theta(params.theta)
    u = mdp.utility(family, theta)
    rho = params.rho
    q = np.full((mdp.n_states, mdp.n_actions), 1.0 / (1.0 - rho))
    used = 0
    for used in range(1, max_iters + 1):
        q_next = soft_bellman_sweep(mdp, u, rho, q)
        step = np.max(np.abs(q_next - q))
        q = q_next
        if not np.isfinite(step):
            raise NumericError("soft Q iteration produced non-finite values")
        if tol > 0 and step < tol:
            break
    residual = float(np.max(np.abs(soft_bellman_sweep(mdp, u, rho, q) - q)))
    if warn and tol > 0 and residual >= tol:
        warnings.warn(
            f"soft Q iteration residual {residual:.3e} above tol {tol:.1e} after {used} sweeps",
            ConvergenceWarning,
            stacklevel=2,
        )
    v = soft_value(q)
    return SoftSolution(
        Q=_frozen(q), V=_frozen(v), policy=_frozen(softmax_policy(q)),
        residual=residual, iterations_used=used, tol=tol,
    )


def policy_transition(mdp: TabularMdp, policy) -> np.ndarray:
    """State-to-state kernel ``P_pi[s, s'] = sum_a pi(a|s) P(s'|s, a)``."""
    policy = np.asarray(policy, dtype=float)
    return np.einsum("sa,sat->st", policy, mdp.transition)


def _check_distribution(mu, n: int) -> np.ndarray:
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (n,) or np.any(mu < 0) or abs(mu.sum() - 1.0) > 1e-12:
        raise InvalidArgumentError("mu must be a probability vector over states")
    return mu


def occupancy_from_kernel(p_pi: np.ndarray, discount: float, mu) -> np.ndarray:
    """Solve ``d^T (I - discount P_pi) = mu^T``."""
    n = p_pi.shape[0]
    a = np.eye(n) - discount * p_pi.T
    try:
        d = np.linalg.solve(a, mu)
    except np.linalg.LinAlgError as exc:
        raise NumericError("occupancy system is singular") from exc
    if not np.all(np.isfinite(d)):
        raise NumericError("occupancy solve returned non-finite values")
    return d


def discounted_occupancy(mdp: TabularMdp, policy, discount: float, mu=None) -> OccupancyMeasure:
    """Discounted state occupancy ``mu^T sum_t discount^t P_pi^t`` by a dense solve."""
    if not (0.0 < discount < 1.0):
        raise InvalidArgumentError("discount must lie in (0, 1)")
    if mu is None:
        mu = uniform_distribution(mdp.n_states)
    mu = _check_distribution(mu, mdp.n_states)
    d = occupancy_from_kernel(policy_transition(mdp, policy), discount, mu)
    # round-off can leave -1e-17 entries; clip keeps the nonnegativity invariant
    d = np.maximum(d, 0.0)
    return OccupancyMeasure(discount=discount, state_occupancy=_frozen(d), initial_distribution=_frozen(mu))


def uniform_distribution(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def sample_trajectories(
    mdp: TabularMdp,
    policy,
    mu,
    horizon: int,
    n_traj: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``n_traj`` trajectories of ``horizon + 1`` steps.

    Returns ``(states, actions)`` each of shape ``(n_traj, horizon + 1)``.
    Only meant as a Monte Carlo oracle for the exact routines above.
    """
    policy = np.asarray(policy, dtype=float)
    mu = _check_distribution(mu, mdp.n_states)
    pol_cdf = np.cumsum(policy, axis=1)
    p_cdf = np.cumsum(mdp.transition, axis=2)
    states = np.empty((n_traj, horizon + 1), dtype=np.int64)
    actions = np.empty((n_traj, horizon + 1), dtype=np.int64)

    def draw(cdf_rows):
        u = rng.random(cdf_rows.shape[0])[:, None]
        idx = (cdf_rows < u).sum(axis=1)
        return np.minimum(idx, cdf_rows.shape[1] - 1)

    s = draw(np.broadcast_to(np.cumsum(mu), (n_traj, mdp.n_states)))
    for t in range(horizon + 1):
        a = draw(pol_cdf[s])
        states[:, t] = s
        actions[:, t] = a
        if t < horizon:
            s = draw(p_cdf[s, a])
    return states, actions


def as_params(rho: float, theta: Sequence[float] | float) -> PreferenceParams:
    return PreferenceParams(rho=rho, theta=tuple(np.atleast_1d(theta)))
