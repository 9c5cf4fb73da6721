"""Recover utilities and the discounting scheme from continuous-time policy fields.

The inputs are gridded observations of a client's allocation ``alpha(t, x, z)``
and consumption ``c(t, x, z)`` in a constant-coefficient market ``(mu, r,
sigma)``, where ``z`` is the current discount weight. Utilities are recovered
only up to an affine transform; the free scale is fixed by ``U2'(1) = 1`` and
shared by ``U1'``.

Integrals of the form ``int h(y) / y dy`` are evaluated by product
integration: ``h`` is interpolated linearly between grid nodes (and held
constant beyond the ends) and integrated exactly against ``1 / y``.
"""
from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .errors import (
    DegenerateFieldError,
    InvalidArgumentError,
    InvertibilityError,
    SingularIntegrandError,
)

FIELD_COLUMNS = ("t", "x", "z", "alpha", "c")


def crra_fraction(theta: float, mu: float, r: float, sigma: float) -> float:
    """Optimal risky fraction ``(mu - r) / (sigma^2 (1 - theta))`` under power utility."""
    return (mu - r) / (sigma**2 * (1.0 - theta))


def recover_crra_theta(alpha_bar: float, mu: float, r: float, sigma: float) -> float:
    """Invert the constant Merton fraction for the power-utility exponent."""
    if not alpha_bar > 0:
        raise InvalidArgumentError("alpha_bar must be positive")
    if not sigma > 0:
        raise InvalidArgumentError("sigma must be positive")
    if not mu > r:
        raise InvalidArgumentError("need mu > r")
    return 1.0 - (mu - r) / (alpha_bar * sigma**2)


# ---------------------------------------------------------------------------
# quadrature against 1/y
# ---------------------------------------------------------------------------


class LogKernelIntegral:
    """Antiderivative ``F(x) = int_{x_0}^x h(y) / y dy`` for tabulated ``h``."""

    def __init__(self, x_grid, h_values):
        self.x = np.asarray(x_grid, dtype=float)
        self.h = np.asarray(h_values, dtype=float)
        if self.x.ndim != 1 or self.x.size < 2 or np.any(np.diff(self.x) <= 0) or self.x[0] <= 0:
            raise InvalidArgumentError("x grid must be positive, strictly increasing, with >= 2 nodes")
        if self.h.shape[-1] != self.x.size:
            raise InvalidArgumentError("h values must be tabulated on the x grid")
        a, b = self.x[:-1], self.x[1:]
        slope = np.diff(self.h, axis=-1) / (b - a)
        cells = (self.h[..., :-1] - slope * a) * np.log(b / a) + slope * (b - a)
        self.slope = slope
        self.F = np.concatenate([np.zeros(self.h.shape[:-1] + (1,)), np.cumsum(cells, axis=-1)], axis=-1)

    def __call__(self, q) -> np.ndarray:
        """``F(q)``; for 2-d+ ``h`` the leading axes of ``q`` must match ``h``."""
        q = np.asarray(q, dtype=float)
        if np.any(q <= 0):
            raise InvalidArgumentError("integration limits must be positive")
        x, n = self.x, self.x.size
        k = np.clip(np.searchsorted(x, q, side="right") - 1, 0, n - 2)

        def pick(arr, idx):
            if arr.ndim == 1:
                return arr[idx]
            return np.take_along_axis(arr, idx, axis=-1)

        a = x[k]
        s = pick(self.slope, k)
        out = pick(self.F, k) + (pick(self.h, k) - s * a) * np.log(q / a) + s * (q - a)
        # constant extension of h beyond the grid ends
        first, last = np.zeros_like(k), np.full_like(k, n - 1)
        out = np.where(q < x[0], pick(self.h, first) * np.log(q / x[0]), out)
        out = np.where(q > x[-1], pick(self.F, last) + pick(self.h, last) * np.log(q / x[-1]), out)
        return out

    def from_to_one(self, q) -> np.ndarray:
        """``int_q^1 h(y) / y dy``."""
        return self(np.ones_like(np.asarray(q, dtype=float))) - self(q)


# ---------------------------------------------------------------------------
# data types
# ---------------------------------------------------------------------------


def _grid(values, name, positive=False):
    g = np.asarray(values, dtype=float).reshape(-1)
    if g.size == 0 or not np.all(np.isfinite(g)) or np.any(np.diff(g) <= 0):
        raise InvalidArgumentError(f"{name} must be finite and strictly increasing")
    if positive and g[0] <= 0:
        raise InvalidArgumentError(f"{name} must be positive")
    return g


@dataclass(frozen=True, eq=False)
class PolicyField:
    """Observed policy ``alpha[t, x, z]``, ``c[t, x, z]`` on a tensor grid.

    The last ``t`` node is the terminal time ``T``.
    """

    t_grid: np.ndarray
    x_grid: np.ndarray
    z_grid: np.ndarray
    alpha: np.ndarray
    c: np.ndarray
    mu: float
    r: float
    sigma: float

    def __post_init__(self):
        t = _grid(self.t_grid, "t_grid")
        x = _grid(self.x_grid, "x_grid", positive=True)
        z = _grid(self.z_grid, "z_grid", positive=True)
        if z[-1] > 1.0:
            raise InvalidArgumentError("z_grid must lie in (0, 1]")
        shape = (t.size, x.size, z.size)
        alpha = np.asarray(self.alpha, dtype=float)
        c = np.asarray(self.c, dtype=float)
        if alpha.shape != shape or c.shape != shape:
            raise InvalidArgumentError(f"alpha and c must have shape {shape}")
        if not (np.all(np.isfinite(alpha)) and np.all(np.isfinite(c))):
            raise InvalidArgumentError("policy field must be finite")
        if np.any(c > x[None, :, None]) or np.any(c < 0):
            raise InvalidArgumentError("consumption must lie in [0, wealth]")
        if not self.sigma > 0:
            raise InvalidArgumentError("sigma must be positive")
        if not self.mu > self.r:
            raise InvalidArgumentError("need mu > r")
        for name, val in (("t_grid", t), ("x_grid", x), ("z_grid", z), ("alpha", alpha), ("c", c)):
            val = np.array(val)
            val.flags.writeable = False
            object.__setattr__(self, name, val)

    @property
    def excess(self) -> float:
        """``(mu - r) / sigma^2``."""
        return (self.mu - self.r) / self.sigma**2

    @property
    def alpha_terminal(self) -> np.ndarray:
        return self.alpha[-1].mean(axis=-1)

    @property
    def c_terminal(self) -> np.ndarray:
        return self.c[-1].mean(axis=-1)

    @property
    def consumes(self) -> bool:
        return bool(np.any(self.c != 0))


@dataclass(frozen=True, eq=False)
class ReconstructedUtility:
    x_grid: np.ndarray
    u_prime: np.ndarray
    normalization: str = "u2'(1) = 1"
    extrapolated: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class DiscountRecovery:
    t_grid: np.ndarray
    beta_dot: np.ndarray
    dispersion: np.ndarray  # median absolute deviation across nodes
    n_nodes: np.ndarray
    delta_variation: float  # max over (t, z) of the spread of Delta across x

    def beta(self, beta0: float = 1.0) -> np.ndarray:
        """Discount weight path obtained by integrating ``beta_dot`` from ``beta0``."""
        return integrate_discount(self.t_grid, self.beta_dot, beta0)


def integrate_discount(t_grid, beta_dot, beta0: float = 1.0) -> np.ndarray:
    return beta0 + cumulative_trapezoid(beta_dot, t_grid, initial=0.0)


# ---------------------------------------------------------------------------
# reconstruction
# ---------------------------------------------------------------------------


def _terminal_integral(field: PolicyField) -> LogKernelIntegral:
    a_t = field.alpha_terminal
    if np.any(a_t <= 1e-300):
        raise SingularIntegrandError("terminal allocation touches zero; 1/alpha is singular")
    return LogKernelIntegral(field.x_grid, field.excess / a_t)


def reconstruct_terminal_utility(field: PolicyField) -> ReconstructedUtility:
    """``U2'(x) = exp(int_x^1 (mu - r) / (sigma^2 y alpha_T(y)) dy)``."""
    integral = _terminal_integral(field)
    u = np.exp(integral.from_to_one(field.x_grid))
    return ReconstructedUtility(x_grid=field.x_grid, u_prime=u)


def _invert_terminal_consumption(field: PolicyField, values) -> tuple[np.ndarray, np.ndarray]:
    c_t = field.c_terminal
    if np.any(np.diff(c_t) <= 0):
        raise InvertibilityError("terminal consumption is not strictly increasing in wealth")
    values = np.asarray(values, dtype=float)
    x = field.x_grid
    inv = np.interp(values, c_t, x)
    lo, hi = values < c_t[0], values > c_t[-1]
    # linear extrapolation from the end segments
    inv = np.where(lo, x[0] + (values - c_t[0]) * (x[1] - x[0]) / (c_t[1] - c_t[0]), inv)
    inv = np.where(hi, x[-1] + (values - c_t[-1]) * (x[-1] - x[-2]) / (c_t[-1] - c_t[-2]), inv)
    if np.any(inv <= 0):
        raise InvertibilityError("inverse consumption leaves the positive wealth axis")
    return inv, lo | hi


def consumption_marginal_utility(field: PolicyField, c_values) -> np.ndarray:
    """``U1'(c) = U2'(c_T^{-1}(c))`` at arbitrary consumption levels."""
    inv, _ = _invert_terminal_consumption(field, c_values)
    return np.exp(_terminal_integral(field).from_to_one(inv))


def reconstruct_consumption_utility(field: PolicyField, grid=None) -> ReconstructedUtility:
    """``U1'`` on ``grid`` (default: the wealth grid) by composing ``U2'`` with ``c_T^{-1}``."""
    grid = field.x_grid if grid is None else np.asarray(grid, dtype=float)
    inv, extrapolated = _invert_terminal_consumption(field, grid)
    u = np.exp(_terminal_integral(field).from_to_one(inv))
    return ReconstructedUtility(x_grid=grid, u_prime=u, extrapolated=extrapolated)


def compute_delta(field: PolicyField) -> np.ndarray:
    """``Delta(t, x, z)`` from the field, shape ``(nt, nx, nz)``.

    ``int_x^1 dy / (y alpha(t, y, z)) - int_{c_T^{-1}(c(t, x, z))}^1 dy / (y alpha_T(y))``;
    the identifiability argument needs it to be free of ``x``.
    """
    if np.any(field.alpha <= 0):
        raise SingularIntegrandError("allocation touches zero; 1/alpha is singular")
    nt, nx, nz = field.alpha.shape
    h = np.moveaxis(1.0 / field.alpha, 1, -1)  # (nt, nz, nx)
    running = LogKernelIntegral(field.x_grid, h)
    first = running(np.ones((nt, nz, 1))) - running.F  # (nt, nz, nx)
    inv, _ = _invert_terminal_consumption(field, field.c)
    terminal = LogKernelIntegral(field.x_grid, 1.0 / field.alpha_terminal)
    second = terminal.from_to_one(inv)  # (nt, nx, nz)
    return np.moveaxis(first, -1, 1) - second


def value_gradient(field: PolicyField, delta_tz: np.ndarray) -> np.ndarray:
    """``d_x V(t, x, z) = K1(t, z) exp(excess * int_x^1 dy / (y alpha))`` with unit scale."""
    nt, nx, nz = field.alpha.shape
    h = np.moveaxis(field.excess / field.alpha, 1, -1)
    running = LogKernelIntegral(field.x_grid, h)
    tail = running(np.ones((nt, nz, 1))) - running.F  # (nt, nz, nx)
    k1 = field.z_grid[None, :] * np.exp(-field.excess * delta_tz)  # (nt, nz)
    return np.moveaxis(k1[..., None] * np.exp(tail), -1, 1)


def recover_discount_rate(
    field: PolicyField,
    delta: Optional[np.ndarray] = None,
    *,
    exclude_tol: float = 1e-10,
) -> DiscountRecovery:
    """Recover ``beta_dot(t)`` from the differentiated HJB identity.

    ``delta`` is an optional ``(nt, nz)`` table; when omitted it is computed
    from the field and averaged over ``x`` after measuring its x-variation.
    Derivatives are central differences (second order, one-sided at the grid
    edges); the quotient is evaluated at interior ``(x, z)`` nodes and reduced
    by the median at each ``t``. Nodes with ``|d_z d_x V|`` below
    ``exclude_tol`` times its largest value are skipped.
    """
    t, x, z = field.t_grid, field.x_grid, field.z_grid
    if min(t.size, x.size, z.size) < 3:
        raise InvalidArgumentError("need at least 3 nodes along t, x and z")
    if delta is None:
        if not field.consumes:
            raise InvalidArgumentError("Delta must be supplied when the field has no consumption")
        full = compute_delta(field)
        variation = float(np.max(np.ptp(full, axis=1)))
        delta_tz = full.mean(axis=1)
    else:
        delta_tz = np.asarray(delta, dtype=float)
        if delta_tz.shape != (t.size, z.size):
            raise InvalidArgumentError(f"delta table must have shape {(t.size, z.size)}")
        variation = float("nan")

    w = value_gradient(field, delta_tz)
    w_t = np.gradient(w, t, axis=0, edge_order=2)
    w_z = np.gradient(w, z, axis=2, edge_order=2)
    drift = (field.r + 0.5 * field.alpha * (field.mu - field.r)) * x[None, :, None] - field.c
    flux_x = np.gradient(drift * w, x, axis=1, edge_order=2)
    if field.consumes:
        u1p = consumption_marginal_utility(field, field.c)
        c_x = np.gradient(field.c, x, axis=1, edge_order=2)
        flux_x = flux_x + z[None, None, :] * u1p * c_x
    quotient = -(w_t + flux_x) / np.where(w_z == 0, np.nan, w_z)

    inner = (slice(None), slice(1, -1), slice(1, -1))
    q = quotient[inner]
    ok = np.abs(w_z[inner]) > exclude_tol * np.nanmax(np.abs(w_z[inner]))
    ok &= np.isfinite(q)
    if not np.any(ok):
        raise DegenerateFieldError("every interior node has a vanishing d_z d_x V")
    beta_dot = np.full(t.size, np.nan)
    spread = np.full(t.size, np.nan)
    counts = ok.reshape(t.size, -1).sum(axis=1)
    for i in range(t.size):
        vals = q[i][ok[i]]
        if vals.size:
            beta_dot[i] = np.median(vals)
            spread[i] = np.median(np.abs(vals - beta_dot[i]))
    return DiscountRecovery(
        t_grid=t, beta_dot=beta_dot, dispersion=spread, n_nodes=counts, delta_variation=variation
    )


# ---------------------------------------------------------------------------
# manufactured fields
# ---------------------------------------------------------------------------


def power_utility_field(
    theta: float,
    mu: float = 0.08,
    r: float = 0.03,
    sigma: float = 0.2,
    x_grid=None,
    t_grid=(0.0, 0.5, 1.0),
    z_grid=(0.5, 0.75, 1.0),
    consumption_ratio: float = 0.5,
) -> PolicyField:
    """Time-invariant field of a power-utility client with ``c = ratio * x``."""
    x_grid = np.linspace(0.1, 3.0, 400) if x_grid is None else np.asarray(x_grid, dtype=float)
    shape = (len(t_grid), x_grid.size, len(z_grid))
    alpha = np.full(shape, crra_fraction(theta, mu, r, sigma))
    c = np.broadcast_to(consumption_ratio * x_grid[None, :, None], shape)
    return PolicyField(np.asarray(t_grid), x_grid, np.asarray(z_grid), alpha, c, mu, r, sigma)


def _gauss_legendre(a, b, n):
    nodes, weights = np.polynomial.legendre.leggauss(n)
    half = 0.5 * (b - a)
    return 0.5 * (a + b)[..., None] + half[..., None] * nodes, half[..., None] * weights


def manufactured_discount_field(
    lam: float = 0.5,
    theta: float = 0.5,
    bequest_scale: float = 10.0,
    mu: float = 0.08,
    r: float = 0.03,
    sigma: float = 0.2,
    t_grid=None,
    x_grid=None,
    z_grid=None,
    consume: bool = True,
    quad_nodes: int = 48,
) -> tuple[PolicyField, np.ndarray]:
    """Exact field for ``beta_t = exp(-lam t)`` (``lam = 0`` gives a static scheme).

    The client has ``U1(c) = c^theta / theta`` (or no running utility when
    ``consume`` is false) and ``U2(x) = bequest_scale * x^theta / theta``. With
    ``d_x V = K(t, z) x^(theta - 1)`` the differentiated HJB reduces along
    ``dz/dt = beta_dot(t)`` to a linear ODE for ``u = K^(1/(1-theta))``, solved
    here by Gauss-Legendre quadrature. Returns the field and its exact
    ``Delta(t, z)`` table.
    """
    t = np.linspace(0.0, 1.0, 100) if t_grid is None else np.asarray(t_grid, dtype=float)
    x = np.linspace(0.5, 2.0, 100) if x_grid is None else np.asarray(x_grid, dtype=float)
    z = np.linspace(0.5, 1.0, 20) if z_grid is None else np.asarray(z_grid, dtype=float)
    T = t[-1]
    excess = (mu - r) / sigma**2
    alpha0 = excess / (1.0 - theta)
    r0 = r + 0.5 * alpha0 * (mu - r)
    big_b = lambda s: np.exp(-lam * s)  # noqa: E731  antiderivative of beta_dot

    tt, zz = np.meshgrid(t, z, indexing="ij")
    if consume:
        c1 = theta * r0 / (1.0 - theta)
        s, wts = _gauss_legendre(tt, np.full_like(tt, T), quad_nodes)
        z_path = zz[..., None] + big_b(s) - big_b(tt)[..., None]
        if np.any(z_path <= 0):
            raise InvalidArgumentError("discount characteristic leaves z > 0; shrink lam or raise z_grid")
        z_end = zz + big_b(T) - big_b(tt)
        u_end = (bequest_scale * z_end) ** (1.0 / (1.0 - theta))
        u = np.exp(c1 * (T - tt)) * u_end + np.sum(
            wts * np.exp(c1 * (s - tt[..., None])) * z_path ** (1.0 / (1.0 - theta)), axis=-1
        )
        k = u ** (1.0 - theta)
        kappa = (k / zz) ** (-1.0 / (1.0 - theta))
        c = kappa[:, None, :] * x[None, :, None]
    else:
        if lam != 0:
            raise InvalidArgumentError("without running utility only the static scheme is manufactured")
        k = bequest_scale * zz * np.exp(theta * r0 * (T - tt))
        c = np.zeros((t.size, x.size, z.size))
    alpha = np.full((t.size, x.size, z.size), alpha0)
    field = PolicyField(t, x, z, alpha, c, mu, r, sigma)
    # K1 = z exp(-excess * Delta) equals K / bequest_scale under U2'(1) = 1
    delta = -np.log(k / (bequest_scale * zz)) / excess
    return field, delta


# ---------------------------------------------------------------------------
# columnar text I/O
# ---------------------------------------------------------------------------


def write_policy_field(field: PolicyField, path) -> None:
    """Comma-separated ``t,x,z,alpha,c`` rows (t-major, then x, then z).

    Market coefficients are stored in ``# key = value`` header lines.
    """
    tt, xx, zz = np.meshgrid(field.t_grid, field.x_grid, field.z_grid, indexing="ij")
    cols = [tt.ravel(), xx.ravel(), zz.ravel(), field.alpha.ravel(), field.c.ravel()]
    with open(path, "w", newline="\n") as fh:
        for key in ("mu", "r", "sigma"):
            fh.write(f"# {key} = {getattr(field, key):.17g}\n")
        fh.write(",".join(FIELD_COLUMNS) + "\n")
        for row in zip(*cols):
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def read_policy_field(path, **market) -> PolicyField:
    """Inverse of :func:`write_policy_field`; ``market`` overrides header values."""
    header = {}
    with open(path) as fh:
        text = fh.read()
    body = []
    for line in text.splitlines():
        s = line.strip()
        if s.startswith("#"):
            key, _, val = s[1:].partition("=")
            if val:
                header[key.strip()] = float(val)
        elif s:
            body.append(s)
    if not body or tuple(c.strip() for c in body[0].split(",")) != FIELD_COLUMNS:
        raise InvalidArgumentError(f"{path}: expected header {','.join(FIELD_COLUMNS)}")
    data = np.loadtxt(io.StringIO("\n".join(body[1:])), delimiter=",", ndmin=2)
    t, x, z = (np.unique(data[:, i]) for i in range(3))
    if data.shape[0] != t.size * x.size * z.size:
        raise InvalidArgumentError(f"{path}: rows do not form a full (t, x, z) tensor grid")
    order = np.lexsort((data[:, 2], data[:, 1], data[:, 0]))
    data = data[order]
    shape = (t.size, x.size, z.size)
    header.update({k: v for k, v in market.items() if v is not None})
    missing = [k for k in ("mu", "r", "sigma") if k not in header]
    if missing:
        raise InvalidArgumentError(f"{path}: missing market coefficients {missing}")
    return PolicyField(
        t, x, z, data[:, 3].reshape(shape), data[:, 4].reshape(shape),
        header["mu"], header["r"], header["sigma"],
    )
