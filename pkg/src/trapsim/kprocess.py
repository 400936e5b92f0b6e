"""Truncated K-processes and the metastability experiments built on them."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy.linalg import expm

from . import potential
from .environment import WField, rank_traps
from .rng import parallel_map, stream
from .stats import mean_se, total_variation, trend_test
from .walk import Trajectory, WalkConfig, _grow, _walk_occupation_many, simulate_trace_walk


@dataclass(frozen=True)
class KParams:
    """Depths ``w_1 >= w_2 >= ...`` and the rate constant ``v`` (``v_3`` or ``pi/2``)."""

    weights: np.ndarray
    v: float
    c: float = 0.0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).ravel()
        if w.size == 0 or np.any(w <= 0.0):
            raise ValueError("weights must be strictly positive")
        if np.any(np.diff(w) > 0.0):
            raise ValueError("weights must be non-increasing")
        if not self.v > 0.0:
            raise ValueError("rate constant must be positive")
        if self.c != 0.0:
            raise ValueError("only c = 0 is supported")
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True)
class TruncationSchedule:
    pairs: tuple

    def __post_init__(self):
        ells = [ell for _, ell in self.pairs]
        if any(b < a for a, b in zip(ells, ells[1:])):
            raise ValueError("ell_N must be non-decreasing")
        for N, ell in self.pairs:
            if ell < 1:
                raise ValueError("ell_N must be >= 1")

    @classmethod
    def default(cls, Ns, cap=None) -> "TruncationSchedule":
        """``ell_N = floor(log2 N)``, optionally capped per ``N`` by ``cap(N)``."""
        pairs = []
        for N in Ns:
            ell = max(1, int(math.floor(math.log2(N))))
            if cap is not None:
                ell = min(ell, int(cap(N)))
            pairs.append((int(N), ell))
        return cls(tuple(pairs))


def build_generator(params: KParams, M: int) -> np.ndarray:
    """``M x M`` generator: rate ``v/(M w_i)`` from ``i`` to each ``j != i``."""
    if not 1 <= M <= params.weights.size:
        raise ValueError(f"M must lie in [1, {params.weights.size}]")
    w = params.weights[:M]
    Q = np.repeat((params.v / (M * w))[:, None], M, axis=1)
    np.fill_diagonal(Q, 0.0)
    Q[np.diag_indices(M)] = -Q.sum(axis=1)
    return Q


@numba.njit(nogil=True, cache=True)
def _k_path(means, M, i0, horizon, rng):
    states = np.empty(256, np.int64)
    holds = np.empty(256, np.float64)
    i = i0
    t = 0.0
    n = 0
    acc = 0.0  # holding accumulated at the current state across self-jumps
    while True:
        h = rng.standard_exponential() * means[i]
        if n == states.size:
            states, holds = _grow(states, holds, n)
        if t + h >= horizon:
            states[n] = i
            holds[n] = acc + horizon - t
            return states[: n + 1], holds[: n + 1]
        t += h
        acc += h
        j = rng.integers(0, M)
        if j != i:
            states[n] = i
            holds[n] = acc
            n += 1
            acc = 0.0
            i = j


def simulate_truncated_k(params: KParams, M: int, i0: int, horizon: float, seed: int,
                         replica: int = 0) -> Trajectory:
    """Path of the ``M``-truncated process on ``{1..M}``.

    Holds ``Exp(mean w_i/v)`` at ``i`` and then picks a state uniformly from
    ``{1..M}``; self-jumps are merged into the current segment.
    """
    if not 1 <= M <= params.weights.size:
        raise ValueError("invalid M")
    if not 1 <= i0 <= M:
        raise ValueError("start state must lie in {1..M}")
    means = params.weights[:M] / params.v
    s, h = _k_path(means, M, i0 - 1, float(horizon), stream(seed, replica, "kprocess"))
    return Trajectory(s + 1, h)


def k_state_law(params: KParams, M: int, i0: int, t: float) -> np.ndarray:
    """Exact law at time ``t`` of the truncated process started at ``i0``."""
    Q = build_generator(params, M)
    return expm(Q * t)[i0 - 1]


# -- trace convergence --------------------------------------------------------


def trace_convergence_experiment(field: WField, M: int, mode: str) -> list[dict]:
    """Exact trace rates on the ``M`` deepest traps against the K-process limit.

    ``mode`` is ``"d3"`` (limit ``v_3/(M w_i)``) or ``"d2_logN"`` (rates
    multiplied by ``log N``, limit ``pi/(2 M w_i)``). Rows are sorted by
    decreasing absolute relative error.
    """
    d, N = field.d, field.N
    if mode == "d3":
        if d != 3:
            raise ValueError("mode d3 needs a 3-dimensional field")
        scale, v = 1.0, potential.V3
    elif mode == "d2_logN":
        if d != 2:
            raise ValueError("mode d2_logN needs a 2-dimensional field")
        scale, v = math.log(N), math.pi / 2
    else:
        raise ValueError(f"unknown mode {mode!r}")
    traps = rank_traps(field, M)
    chain = potential.ChainSpec.from_field(field)
    R = potential.trace_rates_exact(chain, traps) * scale
    w = field.values[traps]
    rows = []
    for i in range(M):
        for j in range(M):
            if i == j:
                continue
            lim = v / (M * w[i])
            rows.append({"d": d, "N": N, "M": M, "i": i + 1, "j": j + 1, "r_exact": float(R[i, j]),
                         "r_limit": float(lim), "rel_err": float(R[i, j] / lim - 1.0), "mode": mode})
    rows.sort(key=lambda r: -abs(r["rel_err"]))
    return rows


def max_rel_error(rows) -> float:
    return max(abs(r["rel_err"]) for r in rows)


# -- occupation outside the deep traps -----------------------------------------


def _theta_for(field: WField) -> float:
    return math.log(field.N) if field.d == 2 else 1.0


def occupation_negligibility(field: WField, M: int, T: float, replicas: int, seed: int = 0) -> dict:
    """Max over starting traps of the mean time spent outside the ``M`` deepest traps.

    The walk runs with speed-up ``log N`` in ``d = 2`` and ``1`` otherwise.
    """
    n = field.spec.n_sites
    traps = rank_traps(field, M)
    if M == n:
        return {"value": 0.0, "se": 0.0, "per_start": [0.0] * M}
    outside = np.ones(n, dtype=np.bool_)
    outside[traps] = False
    cfg = WalkConfig(field, _theta_for(field), seed)
    per = occupation_by_start(cfg, traps, [outside], T, replicas)[0]
    k = int(np.argmax([m for m, _ in per]))
    return {"value": per[k][0], "se": per[k][1], "per_start": [m for m, _ in per]}


def occupation_by_start(cfg: WalkConfig, starts, masks, T: float, replicas: int) -> list:
    """Mean/SE of occupation of each mask from each start, sharing replica streams.

    Each replica path is simulated once and scored against every mask, so
    comparisons across nested masks use common random numbers.
    """
    nb = cfg.spec.neighbor_table()
    hold = cfg.hold_mean
    starts = [int(s) for s in starts]
    stacked = np.ascontiguousarray(np.array(masks, dtype=np.bool_))

    def one(job):
        si, r = job
        return _walk_occupation_many(nb, hold, starts[si], float(T), stacked,
                                     stream(cfg.seed, r, f"occ-{si}"))

    jobs = [(si, r) for si in range(len(starts)) for r in range(replicas)]
    vals = np.array(parallel_map(one, jobs)).reshape(len(starts), replicas, len(masks)).transpose(2, 0, 1)
    return [[mean_se(vals[mi, si]) for si in range(len(starts))] for mi in range(len(masks))]


def occupation_trend(field: WField, Ms, T: float, replicas: int, seed: int = 0) -> dict:
    """Occupation statistic for several ``M`` with common random numbers, plus trend verdict."""
    Ms = sorted(int(m) for m in Ms)
    n = field.spec.n_sites
    traps = rank_traps(field, max(Ms))
    masks = []
    for M in Ms:
        m = np.ones(n, dtype=np.bool_)
        m[traps[:M]] = False
        masks.append(m)
    cfg = WalkConfig(field, _theta_for(field), seed)
    table = occupation_by_start(cfg, traps, masks, T, replicas)
    values, worst = [], []
    for k, M in enumerate(Ms):
        means = [m for m, _ in table[k][:M]]
        j = int(np.argmax(means))
        values.append(means[j])
        worst.append(j + 1)
    frac, ok = trend_test(values)
    return {"M": Ms, "values": values, "worst_start": worst, "trend_fraction": frac, "verdict": ok}


# -- diagonal schedule ---------------------------------------------------------


def _label_metric(a, b):
    # metric on the compactified integers: |1/i - 1/j|
    return np.abs(1.0 / np.asarray(a, dtype=float) - 1.0 / np.asarray(b, dtype=float))


def diagonal_coupling(fields, schedule: TruncationSchedule, horizon: float, replicas: int = 200,
                      seed: int = 0) -> list[dict]:
    """Compare the trace walk on the ``ell_N`` deepest traps with ``Z^{ell_N}``.

    ``fields`` maps ``N`` to a :class:`WField` of the same environment. For
    each ``(N, ell)`` both processes start from the deepest trap; the report
    holds the mean grid sup-distance in the metric ``|1/i - 1/j|`` (grid step
    ``horizon/1000``), the Monte Carlo total-variation distance of the
    states at ``t in {0.25, 0.5, 1} * horizon``, and the exact TV computed
    from the trace-chain and K-process generators.
    """
    out = []
    grid = np.linspace(0.0, horizon, 1001)
    probes = np.array([0.25, 0.5, 1.0]) * horizon
    for N, ell in schedule.pairs:
        field = fields[N]
        d = field.d
        v = potential.V3 if d >= 3 else math.pi / 2
        theta = math.log(N) if d == 2 else 1.0
        traps = rank_traps(field, ell)
        label = {int(x): k + 1 for k, x in enumerate(traps)}
        params = KParams(np.sort(field.values[traps])[::-1], v)
        cfg = WalkConfig(field, theta, seed)
        sup = []
        xs = np.zeros((replicas, probes.size), dtype=np.int64)
        zs = np.zeros((replicas, probes.size), dtype=np.int64)
        for r in range(replicas):
            if ell == 1:
                xp = Trajectory([1], [horizon])
            else:
                tr = simulate_trace_walk(cfg, int(traps[0]), traps, horizon, replica=r)
                xp = Trajectory([label[int(s)] for s in tr.sites], tr.holdings)
            zp = simulate_truncated_k(params, ell, 1, horizon, seed, replica=r)
            sup.append(float(np.max(_label_metric(xp.state_at(grid[:-1]), zp.state_at(grid[:-1])))))
            xs[r] = xp.state_at(probes * (1 - 1e-12))
            zs[r] = zp.state_at(probes * (1 - 1e-12))
        row = {"N": N, "ell": ell, "sup_distance": float(np.mean(sup))}
        if ell > 1:
            chain = potential.ChainSpec.from_field(field)
            Qx = potential.generator_from_rates(potential.trace_rates_exact(chain, traps) * theta)
            Qz = build_generator(params, ell)
        for k, t in enumerate(probes):
            px = np.bincount(xs[:, k] - 1, minlength=ell) / replicas
            pz = np.bincount(zs[:, k] - 1, minlength=ell) / replicas
            row[f"tv_mc_{k}"] = total_variation(px, pz)
            if ell > 1:
                row[f"tv_exact_{k}"] = total_variation(expm(Qx * t)[0], expm(Qz * t)[0])
            else:
                row[f"tv_exact_{k}"] = 0.0
        out.append(row)
    return out
