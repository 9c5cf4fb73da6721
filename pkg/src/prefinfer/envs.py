"""Environment constructors: random instances and two discretized portfolio problems."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import InvalidArgumentError
from .regmdp import PreferenceParams, TabularMdp, UtilityFamily


def _grid(values, name: str, positive: bool = False) -> np.ndarray:
    g = np.asarray(values, dtype=float).reshape(-1)
    if g.size == 0:
        raise InvalidArgumentError(f"{name} is empty")
    if not np.all(np.isfinite(g)) or np.any(np.diff(g) <= 0):
        raise InvalidArgumentError(f"{name} must be finite and strictly increasing")
    if positive and g[0] <= 0:
        raise InvalidArgumentError(f"{name} must be strictly positive")
    return g


def nearest_node(grid: np.ndarray, x) -> np.ndarray:
    """Index of the nearest grid node; exact midpoints go to the lower node."""
    mids = 0.5 * (grid[:-1] + grid[1:])
    return np.searchsorted(mids, x, side="left")


def _cell_bounds(grid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mids = 0.5 * (grid[:-1] + grid[1:])
    lo = np.concatenate([[-np.inf], mids])
    hi = np.concatenate([mids, [np.inf]])
    return lo, hi


def discretize_gaussian_step(grid, mean: float, std: float) -> np.ndarray:
    """Probability row over ``grid`` for a ``N(mean, std^2)`` step.

    Node ``i`` receives the Gaussian mass of its midpoint cell; the two end
    cells extend to infinity so mass beyond the grid is absorbed there.
    ``std == 0`` puts a point mass on the nearest node.
    """
    g = _grid(grid, "grid")
    if not std >= 0 or not np.isfinite(mean):
        raise InvalidArgumentError("need finite mean and std >= 0")
    return gaussian_rows(g, np.asarray([mean]), np.asarray([std]))[0]


def gaussian_rows(grid: np.ndarray, means: np.ndarray, stds: np.ndarray) -> np.ndarray:
    """Vectorised :func:`discretize_gaussian_step`; returns ``(len(means), len(grid))``."""
    means = np.asarray(means, dtype=float).reshape(-1)
    stds = np.asarray(stds, dtype=float).reshape(-1)
    n = grid.size
    rows = np.zeros((means.size, n))
    point = stds == 0
    if np.any(point):
        rows[np.flatnonzero(point), nearest_node(grid, means[point])] = 1.0
    if np.any(~point):
        mids = 0.5 * (grid[:-1] + grid[1:])
        with np.errstate(over="ignore"):
            z = (mids[None, :] - means[~point, None]) / stds[~point, None]
        cdf = np.concatenate(
            [np.zeros((z.shape[0], 1)), ndtr(z), np.ones((z.shape[0], 1))], axis=1
        )
        rows[~point] = np.diff(cdf, axis=1)
    return rows


# ---------------------------------------------------------------------------
# Merton consumption-allocation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MertonConfig:
    r: float = 1.05
    nu: float = 1.06
    sigma: float = 0.05
    delta: float = 1.0
    wealth_grid: tuple = tuple(np.linspace(0.13, 2.5, 10))
    allocation_grid: tuple = tuple(np.linspace(0.1, 1.0, 10))
    consumption_grid: tuple = tuple(np.linspace(0.0, 2.0, 5))

    def __post_init__(self):
        for name in ("wealth_grid", "allocation_grid", "consumption_grid"):
            g = _grid(getattr(self, name), name, positive=(name == "wealth_grid"))
            object.__setattr__(self, name, tuple(float(v) for v in g))
        if self.sigma < 0 or self.delta <= 0:
            raise InvalidArgumentError("need sigma >= 0 and delta > 0")


def merton_env(config: Optional[MertonConfig] = None) -> tuple[TabularMdp, UtilityFamily]:
    """Discretized discrete-time Merton problem.

    States are wealth nodes; actions are ``(alpha, c)`` pairs in allocation-major
    order (action ``i * n_c + j`` is ``(alpha_i, c_j)``). The reward feature is
    the consumption actually funded, ``min(c, x)``, fed to the exponential
    utility ``1 - exp(-theta c)``.
    """
    cfg = config or MertonConfig()
    x = np.asarray(cfg.wealth_grid)
    alpha, cons = np.meshgrid(cfg.allocation_grid, cfg.consumption_grid, indexing="ij")
    alpha, cons = alpha.ravel(), cons.ravel()

    drift = x[:, None] * (alpha * cfg.nu + (1 - alpha) * cfg.r)[None, :] - cons[None, :]
    mean = x[:, None] + drift * cfg.delta
    std = x[:, None] * alpha[None, :] * cfg.sigma * np.sqrt(cfg.delta)
    kernel = gaussian_rows(x, mean.ravel(), std.ravel()).reshape(x.size, alpha.size, x.size)
    features = np.minimum(cons[None, :], x[:, None])
    labels = {"wealth": x, "alpha": alpha, "c": cons}
    return TabularMdp(kernel, features, labels=labels), UtilityFamily.exponential()


# ---------------------------------------------------------------------------
# investment under unhedgeable risk
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FactorConfig:
    """Stochastic-factor market; coefficient functions are affine in the factor ``y``.

    ``shock_mode="common"`` drives wealth and factor by the same shock;
    ``"correlated"`` drives the factor by a second shock with correlation ``eta``.
    """

    r: float = 1.05
    delta: float = 1.0
    b_slope: float = -0.6
    b_intercept: float = 0.2
    d_slope: float = 0.3
    d_intercept: float = 0.3
    nu_slope: float = 1.0
    nu_intercept: float = 0.0
    sigma_slope: float = 0.5
    sigma_intercept: float = 0.3
    eta: float = 0.5
    shock_mode: str = "common"
    wealth_grid: tuple = tuple(np.linspace(0.1, 2.5, 5))
    factor_grid: tuple = tuple(np.linspace(0.1, 1.0, 5))
    allocation_grid: tuple = tuple(np.linspace(0.1, 1.0, 5))
    quad_nodes: int = 64

    def __post_init__(self):
        for name in ("wealth_grid", "factor_grid", "allocation_grid"):
            g = _grid(getattr(self, name), name, positive=(name != "allocation_grid"))
            object.__setattr__(self, name, tuple(float(v) for v in g))
        if self.shock_mode not in ("common", "correlated"):
            raise InvalidArgumentError("shock_mode must be 'common' or 'correlated'")
        if not (0.0 < self.eta < 1.0):
            raise InvalidArgumentError("eta must lie in (0, 1)")
        if self.delta <= 0:
            raise InvalidArgumentError("delta must be positive")

    def b(self, y):
        return self.b_slope * y + self.b_intercept

    def d(self, y):
        return self.d_slope * y + self.d_intercept

    def nu(self, y):
        return self.nu_slope * y + self.nu_intercept

    def sigma(self, y):
        return self.sigma_slope * y + self.sigma_intercept


def _shock_interval(grid, mean, std):
    """Shock-space interval ``[lo, hi]`` mapping into each grid cell; shape ``(..., n)``."""
    lo, hi = _cell_bounds(grid)
    mean = np.asarray(mean, dtype=float)[..., None]
    std = np.asarray(std, dtype=float)[..., None]
    with np.errstate(divide="ignore", invalid="ignore"):
        zlo = np.where(std > 0, (lo - mean) / std, 0.0)
        zhi = np.where(std > 0, (hi - mean) / std, 0.0)
    # zero volatility: the whole shock line lands in the nearest node's cell
    hit = nearest_node(grid, mean[..., 0])[..., None] == np.arange(grid.size)
    zlo = np.where(std > 0, zlo, np.where(hit, -np.inf, np.inf))
    zhi = np.where(std > 0, zhi, np.where(hit, np.inf, np.inf))
    return zlo, zhi


def _joint_common(zx_lo, zx_hi, zy_lo, zy_hi):
    lo = np.maximum(zx_lo[:, :, None], zy_lo[:, None, :])
    hi = np.minimum(zx_hi[:, :, None], zy_hi[:, None, :])
    return np.where(hi > lo, ndtr(hi) - ndtr(lo), 0.0)


def _joint_correlated(zx_lo, zx_hi, zy_lo, zy_hi, eta, n_nodes):
    # P(Zx in cell i, Zy in cell j) with corr(Zx, Zy) = eta, integrating over
    # u = Phi(Zx) so that summing over j telescopes to the exact x-cell mass
    s = np.sqrt(1.0 - eta**2)
    nodes, weights = np.polynomial.legendre.leggauss(n_nodes)
    ulo, uhi = ndtr(zx_lo), ndtr(zx_hi)  # (m, nx)
    half = 0.5 * (uhi - ulo)
    u = 0.5 * (uhi + ulo)[..., None] + half[..., None] * nodes  # (m, nx, q)
    z = ndtri(np.clip(u, 1e-300, 1 - 1e-16))
    cy_hi = ndtr((zy_hi[:, None, None, :] - eta * z[..., None]) / s)
    cy_lo = ndtr((zy_lo[:, None, None, :] - eta * z[..., None]) / s)
    inner = cy_hi - cy_lo  # (m, nx, q, ny)
    return np.einsum("mxqy,q,mx->mxy", inner, weights, half)


def unhedgeable_env(config: Optional[FactorConfig] = None) -> tuple[TabularMdp, UtilityFamily]:
    """Investment-only problem with a stochastic factor driving drift and volatility.

    States are ``(wealth, factor)`` pairs in wealth-major order; actions are
    allocations. The reward feature of every action at state ``(x, y)`` is
    ``(x, y)``, fed to the two-parameter power utility.
    """
    cfg = config or FactorConfig()
    xg = np.asarray(cfg.wealth_grid)
    yg = np.asarray(cfg.factor_grid)
    ag = np.asarray(cfg.allocation_grid)
    xs, ys = np.meshgrid(xg, yg, indexing="ij")
    xs, ys = xs.ravel(), ys.ravel()
    n_s, n_a = xs.size, ag.size

    x, y, a = xs[:, None], ys[:, None], ag[None, :]
    sq = np.sqrt(cfg.delta)
    mean_x = x + x * (a * cfg.nu(y) + (1 - a) * cfg.r) * cfg.delta
    std_x = x * a * cfg.sigma(y) * sq
    mean_y = np.broadcast_to(y + cfg.b(y) * cfg.delta, (n_s, n_a))
    std_y = np.broadcast_to(cfg.d(y) * sq, (n_s, n_a))

    zx_lo, zx_hi = _shock_interval(xg, mean_x.ravel(), std_x.ravel())
    zy_lo, zy_hi = _shock_interval(yg, mean_y.ravel(), std_y.ravel())
    if cfg.shock_mode == "common":
        joint = _joint_common(zx_lo, zx_hi, zy_lo, zy_hi)
    else:
        joint = _joint_correlated(zx_lo, zx_hi, zy_lo, zy_hi, cfg.eta, cfg.quad_nodes)
    kernel = joint.reshape(n_s, n_a, n_s)

    features = np.broadcast_to(np.stack([xs, ys], axis=-1)[:, None, :], (n_s, n_a, 2))
    labels = {"wealth": xs, "factor": ys, "alpha": ag}
    return TabularMdp(kernel, features, labels=labels), UtilityFamily.power2()


# ---------------------------------------------------------------------------
# random instances
# ---------------------------------------------------------------------------

TRUTH_BOXES = {
    "rho": (0.2, 0.8),
    "exponential": (0.5, 3.0),
    "power2": (0.5, 3.0),
    "linear": (-2.0, 2.0),
}


def random_mdp(
    seed: int, n_states: int, n_actions: int, family: Optional[UtilityFamily] = None
) -> tuple[TabularMdp, PreferenceParams]:
    """Seeded random instance and a ground-truth parameter point.

    Kernel rows are normalized uniform draws. Features are uniform on [0, 1]
    (on [0.1, 1] for the power family, which needs positive inputs). The truth
    is drawn from ``TRUTH_BOXES``.
    """
    if n_states < 1 or n_actions < 1:
        raise InvalidArgumentError("sizes must be >= 1")
    family = family or UtilityFamily.exponential()
    rng = np.random.default_rng(seed)
    p = rng.random((n_states, n_actions, n_states)) + 1e-3
    p /= p.sum(axis=2, keepdims=True)
    fd = family.feature_dim
    shape = (n_states, n_actions) if fd == 0 else (n_states, n_actions, fd)
    if family.family_id == "power2":
        features = rng.uniform(0.1, 1.0, size=shape)
    else:
        features = rng.random(shape)
    rho = rng.uniform(*TRUTH_BOXES["rho"])
    theta = rng.uniform(*TRUTH_BOXES[family.family_id], size=family.dim_theta)
    return TabularMdp(p, features), PreferenceParams(rho=rho, theta=tuple(theta))
