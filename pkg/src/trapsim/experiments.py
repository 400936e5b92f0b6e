"""Named experiments run by the command-line harness.

Each experiment takes a validated parameter dict and returns an
:class:`ExperimentResult`: table rows for ``results.csv``, pass/fail
verdicts, headline metrics and optional plot series. Parameters and their
defaults are listed in :data:`REGISTRY`; ``trapsim list-experiments`` prints
them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import hydro, kprocess, potential
from .environment import (PppConfig, TrapMeasure, WField, check_h1, default_w_min, discretize,
                          sample_ppp_environment)
from .lattice import TorusSpec
from .rng import stream
from .stats import mean_se, trend_test
from .walk import WalkConfig, stay_experiment


class ConfigError(ValueError):
    """Schema violation in an experiment configuration."""


@dataclass
class ExperimentResult:
    rows: list
    columns: list
    verdicts: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    plot: dict | None = None  # {"title", "xlabel", "ylabel", "series": {label: (xs, ys)}, "logx"}


@dataclass(frozen=True)
class Experiment:
    name: str
    description: str
    defaults: dict
    run: Callable
    dims: tuple = (1, 2, 3)


# -- parameter handling ----------------------------------------------------------


def _coerce(name, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"parameter {name!r} must be a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"parameter {name!r} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"parameter {name!r} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"parameter {name!r} must be a string")
        return value
    if isinstance(default, list):
        if name == "seeds" and isinstance(value, int) and not isinstance(value, bool):
            if value < 1:
                raise ConfigError("seeds count must be >= 1")
            return list(range(value))
        if not isinstance(value, list):
            raise ConfigError(f"parameter {name!r} must be a list")
        return list(value)
    return value


def resolve_params(exp: Experiment, given: dict) -> dict:
    """Merge ``given`` over the defaults, rejecting unknown keys and bad types."""
    unknown = sorted(set(given) - set(exp.defaults))
    if unknown:
        raise ConfigError(f"unknown parameter(s) for {exp.name}: {', '.join(unknown)}")
    out = {}
    for k, default in exp.defaults.items():
        out[k] = _coerce(k, given[k], default) if k in given else (list(default) if isinstance(default, list)
                                                                     else default)
    if "d" in out:
        if not isinstance(out["d"], int) or not 1 <= out["d"] <= 3:
            raise ConfigError("dimension out of range")
        if out["d"] not in exp.dims:
            raise ConfigError(f"experiment {exp.name} supports d in {list(exp.dims)}")
    for key in ("N", "Ns"):
        if key in out:
            vals = out[key] if isinstance(out[key], list) else [out[key]]
            if not vals or any(not isinstance(n, int) or isinstance(n, bool) or n < 2 for n in vals):
                raise ConfigError(f"{key} must hold integers >= 2")
    if "alpha" in out and not 0.0 < out["alpha"] < 1.0:
        raise ConfigError("alpha must lie in (0, 1)")
    if "replicas" in out and out["replicas"] < 2:
        raise ConfigError("replicas must be >= 2")
    if "seeds" in out and (not out["seeds"] or any(not isinstance(s, int) for s in out["seeds"])):
        raise ConfigError("seeds must be a non-empty list of integers")
    if "Ms" in out and len(set(out["Ms"])) < 3:
        raise ConfigError("Ms needs at least 3 distinct values for the trend test")
    return out


def _measure(p: dict, d: int, seed: int) -> TrapMeasure:
    atoms = p.get("atoms") or []
    if atoms:
        try:
            pairs = [(a[:-1], a[-1]) for a in atoms]
            return TrapMeasure.from_atoms(pairs, d, background=p.get("background", 0.0))
        except (TypeError, ValueError, IndexError) as exc:
            raise ConfigError(f"bad atoms list: {exc}") from None
    w_min = p.get("w_min", 0.0) or default_w_min(p["alpha"])
    return sample_ppp_environment(PppConfig(p["alpha"], w_min, seed), d, background=p.get("background", 0.0))


def _field(p: dict, W: TrapMeasure, N: int) -> WField:
    floor = p.get("w_floor", 0.0) or None
    return discretize(W, TorusSpec(W.d, N), w_floor=floor)


# -- experiments -----------------------------------------------------------------


def run_env_check(p):
    """(H1) statistic along a sequence of N for many PPP environments."""
    d, Ns = p["d"], sorted(p["N"])
    w_min = p["w_min"] or (16.0 * max(Ns) ** d) ** (-1.0 / p["alpha"])
    rows, passes, series = [], [], {}
    for seed in p["seeds"]:
        W = sample_ppp_environment(PppConfig(p["alpha"], w_min, seed), d, background=p["background"])
        floor = p["w_floor"] or w_min
        stats = []
        for N in Ns:
            f = discretize(W, TorusSpec(d, N), w_floor=floor)
            h1 = check_h1(f, p["gamma0"])
            stats.append(h1)
            rows.append({"seed": seed, "N": N, "n_atoms": W.n_atoms, "total_mass": W.total_mass,
                         "max_cell": float(f.values.max()), "h1": h1})
        frac, ok = trend_test(stats)
        passes.append(ok)
        if len(series) < 8:
            series[f"seed {seed}"] = (Ns, [math.log10(s) for s in stats])
    share = float(np.mean(passes))
    return ExperimentResult(
        rows, ["seed", "N", "n_atoms", "total_mass", "max_cell", "h1"],
        {"h1_decreasing": share >= p["pass_fraction"]},
        {"fraction_decreasing": share, "w_min": w_min},
        {"title": "(H1) statistic", "xlabel": "N", "ylabel": "log10 statistic", "series": series, "logx": True},
    )


def _random_instance(spec: TorusSpec, seed: int):
    rng = stream(seed, 0, "identity-instance")
    n = spec.n_sites
    values = np.exp(rng.normal(0.0, 1.5, n))
    f = WField.from_values(spec, values)
    perm = rng.permutation(n)
    kA = int(rng.integers(1, min(4, n - 2) + 1))
    A = np.sort(perm[:kA])
    y = int(perm[kA])
    extra = int(rng.integers(0, min(6, n - kA - 1) + 1))
    F = np.sort(perm[: kA + 1 + extra])
    return f, A, y, F


def run_potential_identities(p):
    """Escape and expected-hitting identities on randomized instances."""
    spec = TorusSpec(p["d"], p["N"])
    rows = []
    for seed in p["seeds"]:
        f, A, y, F = _random_instance(spec, seed)
        chain = potential.ChainSpec.from_field(f)
        for name, (lhs, rhs) in (("escape", potential.escape_identity(chain, y, A)),
                                 ("expected_hitting", potential.expected_hitting_identity(chain, F, y, A))):
            rows.append({"seed": seed, "identity": name, "lhs": lhs, "rhs": rhs,
                         "rel_err": abs(lhs - rhs) / max(abs(rhs), 1e-300)})
    worst = max(r["rel_err"] for r in rows)
    return ExperimentResult(rows, ["seed", "identity", "lhs", "rhs", "rel_err"],
                            {"identities": worst <= p["tol"]}, {"max_rel_err": worst})


def run_capacity_limits(p):
    """Skeleton capacity between antipodal sites against its N -> infinity limit."""
    d, Ns = p["d"], sorted(p["N"])
    if d == 3:
        target = potential.V3 / 2
    else:
        target = math.pi / 4
    rows, devs = [], []
    for N in Ns:
        spec = TorusSpec(d, N)
        x = (0,) * d
        y = (N // 2,) * d
        cap = potential.capacity_skeleton(spec, [x], [y])
        scaled = cap * math.log(N) if d == 2 else cap
        dev = scaled / target - 1.0
        devs.append(abs(dev))
        rows.append({"d": d, "N": N, "capacity": cap, "scaled": scaled, "limit": target, "rel_dev": dev})
    _, trend = trend_test(devs)
    return ExperimentResult(
        rows, ["d", "N", "capacity", "scaled", "limit", "rel_dev"],
        {"trend": trend, "final_deviation": devs[-1] <= p["tol"]},
        {"final_rel_dev": devs[-1]},
        {"title": "capacity vs limit", "xlabel": "N", "ylabel": "scaled capacity",
         "series": {"capacity": (Ns, [r["scaled"] for r in rows]), "limit": (Ns, [target] * len(Ns))},
         "logx": True},
    )


def run_trace_convergence(p):
    """Exact trace rates on the top-M traps against the K-process limit."""
    d, Ns, M = p["d"], sorted(p["N"]), p["M"]
    mode = "d3" if d == 3 else "d2_logN"
    W = _measure(p, d, p["seeds"][0])
    rows, worst = [], []
    for N in Ns:
        table = kprocess.trace_convergence_experiment(_field(p, W, N), M, mode)
        rows.extend(table)
        worst.append(kprocess.max_rel_error(table))
    _, trend = trend_test(worst)
    return ExperimentResult(
        rows, ["d", "N", "M", "i", "j", "r_exact", "r_limit", "rel_err", "mode"],
        {"trend": trend, "final_error": worst[-1] <= p["tol"]},
        {"max_rel_err_by_N": dict(zip(map(str, Ns), worst))},
        {"title": "trace-rate error", "xlabel": "N", "ylabel": "max relative error",
         "series": {"max |rel err|": (Ns, worst)}, "logx": True},
    )


def run_occupation(p):
    """Time outside the M deepest traps for increasing M, over many environments."""
    d, N = p["d"], p["N"]
    rows, passes = [], []
    for seed in p["seeds"]:
        W = _measure(p, d, seed)
        f = _field(p, W, N)
        res = kprocess.occupation_trend(f, p["Ms"], p["T"], p["replicas"], seed=seed)
        passes.append(res["verdict"])
        for M, v, j in zip(res["M"], res["values"], res["worst_start"]):
            rows.append({"seed": seed, "N": N, "M": M, "occupation": v, "worst_start": j})
    share = float(np.mean(passes))
    return ExperimentResult(rows, ["seed", "N", "M", "occupation", "worst_start"],
                            {"occupation_decreasing": share >= p["pass_fraction"]},
                            {"fraction_decreasing": share})


_PROFILES = {
    "bump": lambda x: 1.0 + 0.5 * np.cos(2 * np.pi * x),
    "constant": lambda x: np.ones_like(x),
    "step": lambda x: np.where((x >= 0.25) & (x < 0.75), 2.0, 0.5),
}
_TESTS = {
    "cos": lambda x: np.cos(2 * np.pi * x),
    "one": lambda x: np.ones_like(x),
    "sin": lambda x: np.sin(2 * np.pi * x),
}


def _lookup(table, name, what):
    if name not in table:
        raise ConfigError(f"unknown {what} {name!r}; choose from {sorted(table)}")
    return table[name]


def run_hydro(p):
    """Particle Monte Carlo against the mean-density solver (expectation identity)."""
    u0 = _lookup(_PROFILES, p["u0"], "profile")
    H = _lookup(_TESTS, p["H"], "test function")
    W = _measure(p, 1, p["seeds"][0])
    rows, ok = [], True
    for N in sorted(p["N"]):
        f = _field(p, W, N)
        cfg = hydro.HydroConfig(f, p["gamma"], u0, horizon=p["t"], bouchaud=p["bouchaud"],
                                alpha=p["alpha"], seed=p["seeds"][0])
        dens = hydro.solve_master(cfg, times=np.array([0.0, p["t"]]))
        mc, se, ode = hydro.hydro_comparison(cfg, H, p["t"], p["replicas"], density=dens)
        z = (mc - ode) / se if se > 0 else (0.0 if mc == ode else math.inf)
        ok &= abs(z) <= 3.0
        drift = float(np.ptp(dens.conserved_mass) / dens.conserved_mass[0])
        rows.append({"N": N, "mc_mean": mc, "mc_se": se, "ode_value": ode, "z": z, "mass_drift": drift,
                     "solver_steps": dens.steps})
    return ExperimentResult(rows, ["N", "mc_mean", "mc_se", "ode_value", "z", "mass_drift", "solver_steps"],
                            {"expectation_identity": bool(ok)},
                            {"max_abs_z": max(abs(r["z"]) for r in rows)})


def run_two_blocks(p):
    """Two-blocks statistic for shrinking block fractions (diagnostic)."""
    G = _lookup(_TESTS, p["G"], "test function")
    N = p["N"]
    eps = p["epsilons"]
    rows, passes = [], []
    for seed in p["seeds"]:
        W = _measure(p, 1, seed)
        cfg = hydro.HydroConfig(_field(p, W, N), p["gamma"], _lookup(_PROFILES, p["u0"], "profile"),
                                horizon=p["T"], seed=seed)
        table = hydro.two_blocks_diagnostic(cfg, G, eps, p["replicas"])
        passes.append(trend_test([r["mean"] for r in table])[1])
        for r in table:
            rows.append({"seed": seed, "N": N, **r})
    share = float(np.mean(passes))
    return ExperimentResult(rows, ["seed", "N", "epsilon", "block", "mean", "se"],
                            {"decreasing_in_epsilon": share >= p["pass_fraction"]},
                            {"fraction_decreasing": share})


def run_stay2d(p):
    """Probability of being far from a deep trap at time t in d = 2, along N."""
    Ns = sorted(p["N"])
    rows, passes = [], []
    for seed in p["seeds"]:
        W = _measure(p, 2, seed)
        probs = []
        for N in Ns:
            f = _field(p, W, N)
            ell = max(1, int(round(p["ell_fraction"] * N)))
            res = stay_experiment(WalkConfig(f, 1.0, seed), p["j"], p["t"], ell, p["replicas"])
            probs.append(res["p"])
            rows.append({"seed": seed, "N": N, "ell": ell, "p": res["p"], "se": res["se"],
                         "censored": res["censored"]})
        passes.append(trend_test(probs)[1])
    share = float(np.mean(passes))
    return ExperimentResult(rows, ["seed", "N", "ell", "p", "se", "censored"],
                            {"stay_decreasing": share >= p["pass_fraction"]},
                            {"fraction_decreasing": share})


def run_kproc_diagonal(p):
    """Trace walk on the ell_N deepest traps against the truncated K-process."""
    d = p["d"]
    Ns = sorted(p["N"])
    W = _measure(p, d, p["seeds"][0])
    fields = {N: _field(p, W, N) for N in Ns}
    resolved = {N: int(np.count_nonzero(fields[N].raw > 0.0)) for N in Ns}
    if p["ell"]:
        if len(p["ell"]) != len(Ns):
            raise ConfigError("ell must list one value per N")
        schedule = kprocess.TruncationSchedule(tuple(zip(Ns, p["ell"])))
    else:
        schedule = kprocess.TruncationSchedule.default(Ns, cap=lambda N: resolved[N])
    out = kprocess.diagonal_coupling(fields, schedule, p["T"], p["replicas"], seed=p["seeds"][0])
    cols = ["N", "ell", "sup_distance", "tv_mc_0", "tv_mc_1", "tv_mc_2", "tv_exact_0", "tv_exact_1", "tv_exact_2"]
    return ExperimentResult(out, cols, {}, {"schedule": [list(x) for x in schedule.pairs]},
                            {"title": "diagonal coupling", "xlabel": "N", "ylabel": "TV at t = T",
                             "series": {"exact": (Ns, [r["tv_exact_2"] for r in out]),
                                        "monte carlo": (Ns, [r["tv_mc_2"] for r in out])}, "logx": True})


_ENV = {"alpha": 0.5, "w_min": 0.0, "w_floor": 0.0, "background": 0.0, "atoms": []}

REGISTRY = {
    e.name: e
    for e in [
        Experiment("env-check", "(H1) regularity statistic along N for PPP environments",
                   {"d": 1, "N": [2**k for k in range(7, 14)], "alpha": 0.5, "gamma0": 1.5, "seeds": list(range(50)),
                    "background": 0.0, "w_min": 0.0, "w_floor": 0.0, "pass_fraction": 0.9}, run_env_check),
        Experiment("potential-identities", "escape and expected-hitting identities on random instances",
                   {"d": 2, "N": 8, "seeds": list(range(50)), "tol": 1e-8}, run_potential_identities),
        Experiment("capacity-limits", "antipodal capacity against v3/2 (d=3) or pi/4 (d=2, times log N)",
                   {"d": 3, "N": [8, 16, 32], "tol": 0.10, "seeds": [0]}, run_capacity_limits, dims=(2, 3)),
        Experiment("trace-convergence", "exact trace rates on the top-M traps against the K-process limit",
                   {"d": 3, "N": [16, 24, 32], "M": 4, "tol": 0.10, "seeds": [0], **_ENV,
                    "background": 0.01}, run_trace_convergence, dims=(2, 3)),
        Experiment("occupation", "time spent outside the M deepest traps, decreasing in M",
                   {"d": 3, "N": 32, "Ms": [2, 4, 8, 16], "T": 3.0, "replicas": 100, "seeds": list(range(20)),
                    "pass_fraction": 0.8, **_ENV}, run_occupation, dims=(2, 3)),
        Experiment("hydro", "particle Monte Carlo against the mean-density solver",
                   {"d": 1, "N": [64, 256], "gamma": 1.0, "t": 0.5, "replicas": 200, "u0": "bump", "H": "cos",
                    "bouchaud": False, "seeds": [0], **_ENV, "background": 1.0}, run_hydro, dims=(1,)),
        Experiment("two-blocks", "two-blocks statistic for shrinking block fractions",
                   {"d": 1, "N": 256, "epsilons": [0.25, 0.125, 0.0625], "gamma": 1.0, "T": 0.5, "replicas": 40,
                    "u0": "bump", "G": "cos", "seeds": list(range(10)), "pass_fraction": 0.8, **_ENV,
                    "background": 1.0}, run_two_blocks, dims=(1,)),
        Experiment("stay2d", "probability of leaving a deep trap's neighbourhood in d=2",
                   {"d": 2, "N": [64, 128, 256], "j": 1, "t": 1.0, "ell_fraction": 0.125, "replicas": 4000,
                    "seeds": list(range(20)), "pass_fraction": 0.8, **_ENV}, run_stay2d, dims=(2,)),
        Experiment("kproc-diagonal", "trace walk on ell_N deepest traps against the truncated K-process",
                   {"d": 3, "N": [8, 16, 32], "ell": [], "T": 1.0, "replicas": 200, "seeds": [0], **_ENV},
                   run_kproc_diagonal, dims=(2, 3)),
    ]
}
