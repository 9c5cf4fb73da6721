"""Maximum-likelihood gradient ascent over ``(rho, theta)`` and likelihood scans."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidArgumentError, NumericError
from .likelihood import evaluate
from .regmdp import PreferenceParams, TabularMdp, UtilityFamily

SCHEDULES = ("inv_k", "inv_sqrt_k", "constant")
DEFAULT_THETA_BOX = {"exponential": (0.01, 5.0), "power2": (0.01, 10.0), "linear": (-10.0, 10.0)}


def step_size(schedule: str, c: float, k: int) -> float:
    """Learning rate at outer iteration ``k >= 1``."""
    if schedule == "inv_k":
        return c / k
    if schedule == "inv_sqrt_k":
        return c / math.sqrt(k)
    if schedule == "constant":
        return c
    raise InvalidArgumentError(f"unknown schedule {schedule!r}")


@dataclass(frozen=True)
class MleConfig:
    """Settings for :func:`run_mle`.

    ``init_params`` fixes the starting point; otherwise it is drawn with
    ``numpy.random.default_rng(seed)``: ``rho`` uniform on ``init_rho_box``,
    then each theta coordinate uniform on ``init_theta_box``.

    ``inner_mode="fixed"`` runs exactly ``inner_iters`` soft-Q sweeps per outer
    iteration; ``"tol"`` iterates until the update is below ``inner_tol``.
    """

    gamma: float = 0.6
    schedule: str = "inv_k"
    c: float = 1000.0
    max_outer_iters: int = 100
    inner_iters: int = 100
    inner_mode: str = "tol"
    inner_tol: float = 1e-10
    init_params: Optional[PreferenceParams] = None
    init_rho_box: tuple = (0.1, 0.2)
    init_theta_box: tuple = (0.0, 1.0)
    rho_box: tuple = (0.01, 0.99)
    theta_box: Optional[tuple] = None
    stop_grad_norm: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise InvalidArgumentError(f"schedule must be one of {SCHEDULES}")
        if not self.c > 0:
            raise InvalidArgumentError("learning-rate coefficient c must be positive")
        if self.inner_iters < 1 or self.max_outer_iters < 1:
            raise InvalidArgumentError("inner_iters and max_outer_iters must be >= 1")
        if self.inner_mode not in ("fixed", "tol"):
            raise InvalidArgumentError("inner_mode must be 'fixed' or 'tol'")
        if not (0.0 < self.gamma < 1.0):
            raise InvalidArgumentError("gamma must lie in (0, 1)")
        lo, hi = self.rho_box
        if not (0.0 < lo < hi < 1.0):
            raise InvalidArgumentError("rho_box must satisfy 0 < lo < hi < 1")

    def solver_kwargs(self) -> dict:
        if self.inner_mode == "fixed":
            return {"max_iters": self.inner_iters, "tol": 0.0}
        return {"max_iters": 10_000, "tol": self.inner_tol}

    def theta_bounds(self, family: UtilityFamily) -> tuple[np.ndarray, np.ndarray]:
        box = self.theta_box or DEFAULT_THETA_BOX[family.family_id]
        lo, hi = _as_pair_list(box, family.dim_theta)
        lo = np.maximum(lo, np.asarray(family.lower))
        hi = np.minimum(hi, np.asarray(family.upper))
        if np.any(lo >= hi):
            raise InvalidArgumentError("theta_box does not intersect the family domain")
        return lo, hi

    def initial_params(self, family: UtilityFamily) -> PreferenceParams:
        if self.init_params is not None:
            return self.init_params
        rng = np.random.default_rng(self.seed)
        rho = rng.uniform(*self.init_rho_box)
        lo, hi = _as_pair_list(self.init_theta_box, family.dim_theta)
        theta = rng.uniform(lo, hi)
        return PreferenceParams(rho=rho, theta=tuple(theta))


def _as_pair_list(box, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Accept ``(lo, hi)`` or ``[(lo1, hi1), ...]``; return per-coordinate arrays."""
    arr = np.asarray(box, dtype=float)
    if arr.shape == (2,):
        return np.full(dim, arr[0]), np.full(dim, arr[1])
    if arr.shape == (dim, 2):
        return arr[:, 0].copy(), arr[:, 1].copy()
    raise InvalidArgumentError(f"box {box!r} does not match dim_theta={dim}")


@dataclass(frozen=True)
class IterationRecord:
    k: int
    rho: float
    theta: tuple
    log_likelihood: float
    grad_norm: float
    step: float
    wall_ms: float


@dataclass
class InferenceTrace:
    records: list = field(default_factory=list)
    status: str = "max_iters"
    final_params: Optional[PreferenceParams] = None

    def __len__(self):
        return len(self.records)

    def as_array(self) -> np.ndarray:
        """Rows ``(k, rho, theta..., L, grad_norm, step)``; wall time excluded."""
        return np.array(
            [(r.k, r.rho, *r.theta, r.log_likelihood, r.grad_norm, r.step) for r in self.records]
        )


def project(vec: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    return np.minimum(np.maximum(vec, lo), hi)


def run_mle(
    mdp: TabularMdp,
    family: UtilityFamily,
    behavior_policy,
    config: MleConfig = MleConfig(),
    mu=None,
) -> InferenceTrace:
    """Projected gradient ascent on the discounted log-likelihood.

    Each outer iteration solves the soft fixed point at the current parameters,
    records ``L`` and ``|grad L|``, then moves by ``zeta_k * grad L`` and
    projects onto the box. Stops early once ``|grad L| < stop_grad_norm``.
    """
    theta_lo, theta_hi = config.theta_bounds(family)
    lo = np.append(theta_lo, config.rho_box[0])
    hi = np.append(theta_hi, config.rho_box[1])
    params = config.initial_params(family)
    x = project(params.as_vector(), lo, hi)
    solver = config.solver_kwargs()
    trace = InferenceTrace()

    for k in range(1, config.max_outer_iters + 1):
        t0 = time.perf_counter()
        params = PreferenceParams.from_vector(x)
        try:
            ev = evaluate(mdp, family, behavior_policy, params, config.gamma, mu, **solver)
            value, grad = ev.value, ev.grad
        except (NumericError, FloatingPointError):
            value, grad = math.nan, np.full_like(x, math.nan)
        gnorm = float(np.linalg.norm(grad))
        zeta = step_size(config.schedule, config.c, k)
        trace.records.append(
            IterationRecord(
                k=k, rho=params.rho, theta=params.theta, log_likelihood=value,
                grad_norm=gnorm, step=zeta, wall_ms=1e3 * (time.perf_counter() - t0),
            )
        )
        if not (np.isfinite(value) and np.isfinite(gnorm)):
            trace.status = "diverged"
            break
        if gnorm < config.stop_grad_norm:
            trace.status = "converged"
            break
        x = project(x + zeta * grad, lo, hi)
    else:
        trace.status = "max_iters"
    trace.final_params = PreferenceParams.from_vector(x)
    return trace


def axis_index(axis: str, dim_theta: int) -> int:
    """Position of a named coordinate in the ``(theta..., rho)`` vector."""
    if axis == "rho":
        return dim_theta
    if axis == "theta" and dim_theta == 1:
        return 0
    if axis.startswith("theta") and axis[5:].isdigit():
        i = int(axis[5:]) - 1
        if 0 <= i < dim_theta:
            return i
    raise InvalidArgumentError(f"unknown axis {axis!r} for dim_theta={dim_theta}")


def axis_names(dim_theta: int) -> list[str]:
    if dim_theta == 1:
        return ["theta", "rho"]
    return [f"theta{i + 1}" for i in range(dim_theta)] + ["rho"]


def landscape_scan(
    mdp: TabularMdp,
    family: UtilityFamily,
    behavior_policy,
    axis: str,
    grid: Sequence[float],
    fixed: PreferenceParams,
    gamma: float,
    mu=None,
    **solver,
) -> np.ndarray:
    """``(value, L, dL/d axis)`` rows along one coordinate, others held at ``fixed``."""
    i = axis_index(axis, family.dim_theta)
    base = fixed.as_vector()
    rows = []
    for v in np.asarray(grid, dtype=float):
        x = base.copy()
        x[i] = v
        ev = evaluate(mdp, family, behavior_policy, PreferenceParams.from_vector(x), gamma, mu, **solver)
        rows.append((v, ev.value, ev.grad[i]))
    return np.array(rows)
