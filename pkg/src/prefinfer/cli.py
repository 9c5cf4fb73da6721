"""Command-line front end.

Usage::

    prefinfer {solve,infer,landscape,gradcheck,reconstruct} --config run.ini \
        [--out DIR] [--seed N] [section.key=value ...]

The config file is INI-style; ``[section]`` headers and ``key = value`` lines
address the dotted names used for command-line overrides (``mle.c=500``).
Values are parsed as JSON when possible (numbers, lists, ``true``) and kept
as strings otherwise. Relative file paths resolve against the config file.

Sections
--------
``[env]``        ``kind`` = merton | unhedgeable | random | kernel, plus any
                 MertonConfig / FactorConfig field; ``n_states``/``n_actions``
                 for random; ``path`` for a JSON kernel file with keys
                 ``transition`` and ``reward_feature``; ``mu`` = uniform or a list.
``[family]``     ``id`` (defaults to the environment's family), ``dim`` for linear.
``[truth]``      ``rho``, ``theta``: the demonstrating client.
``[behavior]``   ``path``: CSV ``state,action,pi`` overriding the truth policy.
``[params]``     ``rho``, ``theta``: evaluation point for ``solve`` (default truth).
``[solve]``      ``max_iters``, ``tol``.
``[mle]``        MleConfig fields plus ``init_rho``/``init_theta``.
``[landscape]``  ``axes`` (list), ``grid_<axis>`` = [lo, hi, n].
``[gradcheck]``  ``instances``, ``gammas``, ``points``, ``rel_tol``,
                 ``stationarity_tol``, ``step``.
``[reconstruct]`` ``field``, optional ``delta`` (CSV ``t,z,delta``).
``[run]``        ``seed``.

Exit codes: 0 success, 2 configuration error, 3 failed numeric check.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import sys
import warnings
from pathlib import Path
from typing import Any, Iterable, Optional

import numpy as np

from . import envs, ident_ct
from .errors import DegenerateFieldError, InvalidArgumentError, InvertibilityError
from .likelihood import evaluate, finite_diff_gradient, hessian_at_truth, log_likelihood
from .mle import MleConfig, axis_index, axis_names, landscape_scan, run_mle
from .regmdp import (
    PreferenceParams,
    TabularMdp,
    UtilityFamily,
    soft_q_iteration,
    uniform_distribution,
)

COMMANDS = ("solve", "infer", "landscape", "gradcheck", "reconstruct")
EXIT_OK, EXIT_CONFIG, EXIT_CHECK = 0, 2, 3


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except (json.JSONDecodeError, ValueError):
        return text.strip()


class RunConfig:
    """Dotted-key view over the parsed config file plus overrides."""

    def __init__(self, values: dict, base_dir: Path, seed: Optional[int] = None):
        self.values = values
        self.base_dir = base_dir
        if seed is not None:
            self.values["run.seed"] = seed

    @classmethod
    def load(cls, path, overrides: Iterable[str] = (), seed: Optional[int] = None) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"{path}: config file not found")
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        values = {}
        for section in parser.sections():
            for key, raw in parser.items(section):
                values[f"{section}.{key}"] = _parse_value(raw)
        for item in overrides:
            key, sep, raw = item.partition("=")
            if not sep or "." not in key:
                raise ConfigError(f"override {item!r}: expected section.key=value")
            values[key.strip()] = _parse_value(raw)
        return cls(values, path.parent, seed)

    def get(self, key: str, default: Any = None) -> Any:
        return self.values.get(key, default)

    def require(self, key: str) -> Any:
        if key not in self.values:
            raise ConfigError(f"missing required key {key}")
        return self.values[key]

    def section(self, name: str) -> dict:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    def path(self, key: str) -> Path:
        p = Path(str(self.require(key)))
        p = p if p.is_absolute() else self.base_dir / p
        if not p.is_file():
            raise ConfigError(f"{key}: file {p} does not exist")
        return p

    @property
    def seed(self) -> int:
        seed = self.get("run.seed", 0)
        if not isinstance(seed, int):
            raise ConfigError(f"run.seed must be an integer, got {seed!r}")
        return seed


def _build_dataclass(cls, options: dict, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(options) - names)
    if unknown:
        raise ConfigError(f"[{section}] unknown keys {unknown}")
    try:
        return cls(**options)
    except (InvalidArgumentError, TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def _params(cfg: RunConfig, section: str) -> Optional[PreferenceParams]:
    if f"{section}.rho" not in cfg.values:
        return None
    theta = cfg.require(f"{section}.theta")
    theta = theta if isinstance(theta, list) else [theta]
    try:
        return PreferenceParams(rho=float(cfg.require(f"{section}.rho")), theta=tuple(map(float, theta)))
    except (InvalidArgumentError, TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


FAMILIES = {"exponential": UtilityFamily.exponential, "power2": UtilityFamily.power2}


def _family(cfg: RunConfig, default: Optional[UtilityFamily]) -> UtilityFamily:
    fid = cfg.get("family.id")
    if fid is None:
        if default is None:
            raise ConfigError("missing required key family.id")
        return default
    if fid == "linear":
        return UtilityFamily.linear(int(cfg.get("family.dim", 1)))
    if fid not in FAMILIES:
        raise ConfigError(f"family.id must be one of exponential, power2, linear; got {fid!r}")
    return FAMILIES[fid]()


@dataclasses.dataclass
class Problem:
    mdp: TabularMdp
    family: UtilityFamily
    truth: Optional[PreferenceParams]
    mu: np.ndarray


def load_problem(cfg: RunConfig) -> Problem:
    options = cfg.section("env")
    kind = options.pop("kind", None)
    mu = options.pop("mu", "uniform")
    truth = _params(cfg, "truth")
    try:
        if kind == "merton":
            mdp, family = envs.merton_env(_build_dataclass(envs.MertonConfig, options, "env"))
            family = _family(cfg, family)
        elif kind == "unhedgeable":
            mdp, family = envs.unhedgeable_env(_build_dataclass(envs.FactorConfig, options, "env"))
            family = _family(cfg, family)
        elif kind == "random":
            family = _family(cfg, UtilityFamily.exponential())
            mdp, drawn = envs.random_mdp(
                cfg.seed, int(options.get("n_states", 5)), int(options.get("n_actions", 3)), family
            )
            truth = truth or drawn
        elif kind == "kernel":
            data = json.loads(cfg.path("env.path").read_text())
            mdp = TabularMdp(data["transition"], data["reward_feature"])
            family = _family(cfg, None)
        else:
            raise ConfigError(f"env.kind must be merton, unhedgeable, random or kernel; got {kind!r}")
    except (InvalidArgumentError, KeyError) as exc:
        raise ConfigError(f"[env] {exc}") from None
    if isinstance(mu, str) and mu == "uniform":
        mu_vec = uniform_distribution(mdp.n_states)
    else:
        mu_vec = np.asarray(mu, dtype=float)
        if mu_vec.shape != (mdp.n_states,) or np.any(mu_vec < 0) or abs(mu_vec.sum() - 1) > 1e-12:
            raise ConfigError("env.mu must be 'uniform' or a probability vector over states")
    if truth is not None and not family.contains(truth.theta):
        raise ConfigError("[truth] theta lies outside the family domain")
    return Problem(mdp, family, truth, mu_vec)


def behavior_policy(cfg: RunConfig, prob: Problem) -> np.ndarray:
    if "behavior.path" in cfg.values:
        rows = np.loadtxt(cfg.path("behavior.path"), delimiter=",", skiprows=1, ndmin=2)
        pi = np.zeros((prob.mdp.n_states, prob.mdp.n_actions))
        pi[rows[:, 0].astype(int), rows[:, 1].astype(int)] = rows[:, 2]
        return pi
    if prob.truth is None:
        raise ConfigError("a behavior source is required: [truth] or behavior.path")
    return soft_q_iteration(prob.mdp, prob.family, prob.truth).policy


# ---------------------------------------------------------------------------
# deterministic emitters
# ---------------------------------------------------------------------------


def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, str):
        return value
    return f"{float(value):.17g}"


def write_csv(path: Path, header: Iterable[str], rows: Iterable[Iterable]) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return v if np.isfinite(v) else None
    return value


def write_json(path: Path, payload: dict) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(json.dumps(_jsonable(payload), indent=2) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _solver_kwargs(cfg: RunConfig) -> dict:
    return {"max_iters": int(cfg.get("solve.max_iters", 10_000)), "tol": float(cfg.get("solve.tol", 1e-10))}


def cmd_solve(cfg: RunConfig, out: Path) -> int:
    prob = load_problem(cfg)
    params = _params(cfg, "params") or prob.truth
    if params is None:
        raise ConfigError("solve needs [params] or [truth]")
    sol = soft_q_iteration(prob.mdp, prob.family, params, **_solver_kwargs(cfg))
    n_s, n_a = sol.Q.shape
    write_csv(
        out / "solution.csv",
        ("state", "action", "Q", "pi"),
        ((s, a, sol.Q[s, a], sol.policy[s, a]) for s in range(n_s) for a in range(n_a)),
    )
    write_csv(out / "values.csv", ("state", "V"), ((s, sol.V[s]) for s in range(n_s)))
    print(f"residual {sol.residual:.3e} iterations {sol.iterations_used}")
    return EXIT_OK


def _mle_config(cfg: RunConfig) -> MleConfig:
    options = cfg.section("mle")
    init = None
    if "init_rho" in options:
        theta = options.pop("init_theta")
        theta = theta if isinstance(theta, list) else [theta]
        init = PreferenceParams(rho=float(options.pop("init_rho")), theta=tuple(map(float, theta)))
    for key in ("init_rho_box", "init_theta_box", "rho_box", "theta_box"):
        if key in options and options[key] is not None:
            options[key] = tuple(tuple(v) if isinstance(v, list) else v for v in options[key])
    options["seed"] = cfg.seed
    options["init_params"] = init
    return _build_dataclass(MleConfig, options, "mle")


def cmd_infer(cfg: RunConfig, out: Path) -> int:
    prob = load_problem(cfg)
    pi_b = behavior_policy(cfg, prob)
    config = _mle_config(cfg)
    trace = run_mle(prob.mdp, prob.family, pi_b, config, prob.mu)
    names = ["theta"] if prob.family.dim_theta == 1 else [f"theta{i + 1}" for i in range(prob.family.dim_theta)]
    write_csv(
        out / "trace.csv",
        ("k", "rho", *names, "L", "grad_norm", "step", "ms"),
        (
            (r.k, r.rho, *r.theta, r.log_likelihood, r.grad_norm, r.step, r.wall_ms)
            for r in trace.records
        ),
    )
    last = trace.records[-1]
    summary = {
        "status": trace.status,
        "iterations": len(trace),
        "final": {"rho": trace.final_params.rho, "theta": list(trace.final_params.theta)},
        "last_log_likelihood": last.log_likelihood,
        "last_grad_norm": last.grad_norm,
        "truth": None if prob.truth is None else {"rho": prob.truth.rho, "theta": list(prob.truth.theta)},
        "seed": cfg.seed,
    }
    write_json(out / "summary.json", summary)
    final = trace.final_params
    print(f"status {trace.status} iterations {len(trace)} rho {final.rho:.6g} theta {list(final.theta)}")
    return EXIT_OK


def _default_grid(axis_value: float, is_rho: bool) -> list:
    if is_rho:
        return [max(0.02, axis_value - 0.2), min(0.98, axis_value + 0.2), 41]
    return [0.5 * axis_value, 1.5 * axis_value, 41]


def cmd_landscape(cfg: RunConfig, out: Path) -> int:
    prob = load_problem(cfg)
    pi_b = behavior_policy(cfg, prob)
    fixed = _params(cfg, "params") or prob.truth
    if fixed is None:
        raise ConfigError("landscape needs [params] or [truth] for the fixed coordinates")
    gamma = float(cfg.get("mle.gamma", 0.6))
    names = axis_names(prob.family.dim_theta)
    axes = cfg.get("landscape.axes", names)
    axes = axes if isinstance(axes, list) else [axes]
    base = fixed.as_vector()
    for axis in axes:
        try:
            i = axis_index(axis, prob.family.dim_theta)
        except InvalidArgumentError as exc:
            raise ConfigError(f"landscape.axes: {exc}") from None
        bounds = cfg.get(f"landscape.grid_{axis}", _default_grid(base[i], axis == "rho"))
        if not (isinstance(bounds, list) and len(bounds) == 3):
            raise ConfigError(f"landscape.grid_{axis} must be [lo, hi, n]")
        grid = np.linspace(float(bounds[0]), float(bounds[1]), int(bounds[2]))
        rows = landscape_scan(
            prob.mdp, prob.family, pi_b, axis, grid, fixed, gamma, prob.mu, **_solver_kwargs(cfg)
        )
        write_csv(out / f"landscape_{axis}.csv", ("value", "L", "dL"), rows)
        where = ", ".join(f"{v:.4g}" for v in sign_changes(grid, rows[:, 2])) or "none"
        print(f"{axis}: argmax L at {grid[np.argmax(rows[:, 1])]:.6g}; dL sign changes near {where}")
    return EXIT_OK


def sign_changes(grid, dl, rel_zero: float = 1e-8) -> list:
    """Locations where ``dl`` changes sign; values below ``rel_zero * max|dl|`` count as zero."""
    dl = np.asarray(dl, dtype=float)
    sign = np.where(np.abs(dl) <= rel_zero * np.max(np.abs(dl)), 0.0, np.sign(dl))
    idx = np.flatnonzero(sign)
    out = []
    for a, b in zip(idx[:-1], idx[1:]):
        if sign[a] != sign[b]:
            out.append(0.5 * (grid[a] + grid[b]))
    return out


def relative_error(analytic, reference, floor: float = 1e-8) -> float:
    """``|a - b| / max(|b|, floor)`` in the Euclidean norm."""
    diff = np.linalg.norm(np.asarray(analytic) - np.asarray(reference))
    return float(diff / max(np.linalg.norm(reference), floor))


def gradcheck_instance(mdp, family, truth, mu, gamma, rng, points=5, step=1e-5) -> dict:
    """Stationarity, Hessian sign and FD agreement for one instance and ``gamma``."""
    pi_b = soft_q_iteration(mdp, family, truth, tol=1e-13).policy
    tight = {"max_iters": 100_000, "tol": 1e-13}
    at_truth = evaluate(mdp, family, pi_b, truth, gamma, mu, **tight)
    hess = hessian_at_truth(mdp, family, truth, gamma, mu, **tight)
    worst = 0.0
    base = truth.as_vector()
    lo = np.append(np.asarray(family.lower, dtype=float), 0.0)
    hi = np.append(np.asarray(family.upper, dtype=float), 1.0)
    for _ in range(points):
        x = base + rng.uniform(-0.1, 0.1, size=base.size)
        x = np.clip(x, lo + 0.02, hi - 0.02)
        p = PreferenceParams.from_vector(x)
        analytic = evaluate(mdp, family, pi_b, p, gamma, mu, **tight).grad
        fd = finite_diff_gradient(
            lambda q: log_likelihood(mdp, family, pi_b, q, gamma, mu, **tight), p, step, family
        )
        worst = max(worst, relative_error(analytic, fd))
    return {
        "stationarity": float(np.linalg.norm(at_truth.grad)),
        "max_eigenvalue": hess.max_eigenvalue,
        "nsd": hess.is_nsd,
        "fd_rel_error": worst,
    }


def cmd_gradcheck(cfg: RunConfig, out: Path) -> int:
    gammas = cfg.get("gradcheck.gammas", [0.4, 0.6, 0.9])
    gammas = gammas if isinstance(gammas, list) else [gammas]
    points = int(cfg.get("gradcheck.points", 5))
    rel_tol = float(cfg.get("gradcheck.rel_tol", 1e-5))
    stat_tol = float(cfg.get("gradcheck.stationarity_tol", 1e-7))
    step = float(cfg.get("gradcheck.step", 1e-5))
    n_inst = int(cfg.get("gradcheck.instances", 1))
    rows = []
    rng = np.random.default_rng(cfg.seed)
    for j in range(n_inst):
        sub = RunConfig(dict(cfg.values), cfg.base_dir, cfg.seed + j)
        prob = load_problem(sub)
        if prob.truth is None:
            raise ConfigError("gradcheck needs [truth] (or env.kind = random)")
        for gamma in gammas:
            res = gradcheck_instance(prob.mdp, prob.family, prob.truth, prob.mu, float(gamma), rng, points, step)
            ok = res["stationarity"] < stat_tol and res["nsd"] and res["fd_rel_error"] < rel_tol
            rows.append((sub.seed, gamma, res["stationarity"], res["max_eigenvalue"], res["fd_rel_error"], ok))
    write_csv(
        out / "gradcheck.csv",
        ("seed", "gamma", "grad_norm_at_truth", "max_eigenvalue", "fd_rel_error", "pass"),
        rows,
    )
    passed = all(r[-1] for r in rows)
    print(f"max relative error {max(r[4] for r in rows):.3e}")
    print(f"max Hessian eigenvalue {max(r[3] for r in rows):.3e}")
    print(f"max gradient norm at truth {max(r[2] for r in rows):.3e}")
    print("PASS" if passed else "FAIL")
    return EXIT_OK if passed else EXIT_CHECK


def _read_delta(path: Path, field: ident_ct.PolicyField) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    t, z = np.unique(data[:, 0]), np.unique(data[:, 1])
    if not (np.allclose(t, field.t_grid) and np.allclose(z, field.z_grid)) or data.shape[0] != t.size * z.size:
        raise ConfigError(f"{path}: delta table must cover the field's (t, z) grid")
    data = data[np.lexsort((data[:, 1], data[:, 0]))]
    return data[:, 2].reshape(t.size, z.size)


def cmd_reconstruct(cfg: RunConfig, out: Path) -> int:
    try:
        field = ident_ct.read_policy_field(
            cfg.path("reconstruct.field"),
            mu=cfg.get("reconstruct.mu"), r=cfg.get("reconstruct.r"), sigma=cfg.get("reconstruct.sigma"),
        )
    except InvalidArgumentError as exc:
        raise ConfigError(str(exc)) from None
    u2 = ident_ct.reconstruct_terminal_utility(field)
    write_csv(out / "u2_prime.csv", ("x", "u_prime"), zip(u2.x_grid, u2.u_prime))
    if field.consumes:
        try:
            u1 = ident_ct.reconstruct_consumption_utility(field)
            write_csv(out / "u1_prime.csv", ("x", "u_prime"), zip(u1.x_grid, u1.u_prime))
        except InvertibilityError as exc:
            print(f"u1 skipped: {exc}")
    else:
        print("u1 skipped: field has no consumption")
    delta = _read_delta(cfg.path("reconstruct.delta"), field) if "reconstruct.delta" in cfg.values else None
    try:
        rec = ident_ct.recover_discount_rate(field, delta)
    except (InvalidArgumentError, DegenerateFieldError) as exc:
        print(f"beta_dot skipped: {exc}")
        return EXIT_OK
    beta = rec.beta()
    write_csv(
        out / "beta_dot.csv",
        ("t", "beta_dot", "beta", "dispersion", "n_nodes"),
        zip(rec.t_grid, rec.beta_dot, beta, rec.dispersion, rec.n_nodes),
    )
    if np.isfinite(rec.delta_variation):
        print(f"Delta variation across x {rec.delta_variation:.3e}")
    print(f"beta_dot/beta median {np.nanmedian(rec.beta_dot / beta):.6g}")
    return EXIT_OK


HANDLERS = {
    "solve": cmd_solve,
    "infer": cmd_infer,
    "landscape": cmd_landscape,
    "gradcheck": cmd_gradcheck,
    "reconstruct": cmd_reconstruct,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prefinfer", description="Preference inference experiments")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="INI config file")
    parser.add_argument("--out", default=".", help="output directory (created if missing)")
    parser.add_argument("--seed", type=int, default=None, help="overrides run.seed")
    parser.add_argument("overrides", nargs="*", metavar="section.key=value")
    return parser


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_intermixed_args(argv)
    try:
        cfg = RunConfig.load(args.config, args.overrides, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return HANDLERS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
