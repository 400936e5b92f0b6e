"""Event-driven simulation of the trap walk and path functionals.

The walk holds an exponential time of mean ``W^N_x / theta`` at ``x`` and then
jumps to a uniformly chosen neighbour. Paths are stored as
:class:`Trajectory` objects (one segment per visit); estimators that only
need a scalar run dedicated kernels that never materialise the path.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numba
import numpy as np

from .environment import WField, rank_traps
from .lattice import TorusSpec
from .rng import parallel_map, stream
from .stats import proportion_se


@dataclass(frozen=True)
class WalkConfig:
    field: WField
    theta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.theta > 0.0:
            raise ValueError("theta must be positive")

    @property
    def spec(self) -> TorusSpec:
        return self.field.spec

    @property
    def hold_mean(self) -> np.ndarray:
        return self.field.values / self.theta


@dataclass(frozen=True)
class Trajectory:
    """Piecewise-constant path: ``sites[k]`` is held for ``holdings[k]``."""

    sites: np.ndarray
    holdings: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.sites, dtype=np.int64).ravel()
        h = np.asarray(self.holdings, dtype=float).ravel()
        if s.size != h.size:
            raise ValueError("sites and holdings differ in length")
        object.__setattr__(self, "sites", s)
        object.__setattr__(self, "holdings", h)

    @property
    def start(self) -> int:
        return int(self.sites[0])

    @property
    def total_time(self) -> float:
        return math.fsum(self.holdings.tolist())

    def __len__(self) -> int:
        return int(self.sites.size)

    @property
    def segments(self):
        return list(zip(self.sites.tolist(), self.holdings.tolist()))

    def jump_times(self) -> np.ndarray:
        """Start time of every segment."""
        return np.concatenate([[0.0], np.cumsum(self.holdings)[:-1]])

    def state_at(self, t) -> np.ndarray:
        """State at time(s) ``t`` (right-continuous)."""
        ends = np.cumsum(self.holdings)
        k = np.searchsorted(ends, np.asarray(t, dtype=float), side="right")
        return self.sites[np.minimum(k, self.sites.size - 1)]

    def is_lattice_path(self, spec: TorusSpec) -> bool:
        if self.sites.size < 2:
            return True
        nb = spec.neighbor_table()
        return bool(np.all((nb[self.sites[:-1]] == self.sites[1:, None]).any(axis=1)))


class Hit(NamedTuple):
    """Entry time; ``censored`` means the horizon was reached first and ``time`` is the horizon."""

    time: float
    censored: bool


# -- kernels ------------------------------------------------------------------


@numba.njit(nogil=True, cache=True)
def _grow(sites, holds, n):
    cap = 2 * sites.size
    s2 = np.empty(cap, np.int64)
    h2 = np.empty(cap, np.float64)
    s2[:n] = sites[:n]
    h2[:n] = holds[:n]
    return s2, h2


@numba.njit(nogil=True, cache=True)
def _walk_path(nb, hold_mean, x0, horizon, rng):
    sites = np.empty(1024, np.int64)
    holds = np.empty(1024, np.float64)
    deg = nb.shape[1]
    x = x0
    t = 0.0
    n = 0
    while True:
        h = rng.standard_exponential() * hold_mean[x]
        if n == sites.size:
            sites, holds = _grow(sites, holds, n)
        sites[n] = x
        if t + h >= horizon:
            holds[n] = horizon - t
            return sites[: n + 1], holds[: n + 1]
        holds[n] = h
        n += 1
        t += h
        x = nb[x, rng.integers(0, deg)]


@numba.njit(nogil=True, cache=True)
def _walk_hit(nb, hold_mean, x0, target, horizon, max_steps, rng):
    deg = nb.shape[1]
    x = x0
    t = 0.0
    k = 0
    while not target[x]:
        t += rng.standard_exponential() * hold_mean[x]
        if t >= horizon or k >= max_steps:
            return min(t, horizon), True, k
        x = nb[x, rng.integers(0, deg)]
        k += 1
    return t, False, k


@numba.njit(nogil=True, cache=True)
def _skeleton_race(nb, x0, A, B, max_steps, rng):
    # 1 if A is entered before B, 0 if B first, -1 if censored
    deg = nb.shape[1]
    x = x0
    for _ in range(max_steps + 1):
        if A[x]:
            return 1
        if B[x]:
            return 0
        x = nb[x, rng.integers(0, deg)]
    return -1


@numba.njit(nogil=True, cache=True)
def _skeleton_return_race(nb, x0, A, max_steps, rng):
    # first-step from x0, then race A against x0; 1 if A first
    deg = nb.shape[1]
    x = nb[x0, rng.integers(0, deg)]
    for _ in range(max_steps):
        if A[x]:
            return 1
        if x == x0:
            return 0
        x = nb[x, rng.integers(0, deg)]
    return -1


@numba.njit(nogil=True, cache=True)
def _clock_walk(nb, W, x0, t, max_steps, rng):
    # skeleton + clock S(k) = sum e_i W(Y_i); returns Y(T(t)) and step count
    deg = nb.shape[1]
    x = x0
    S = 0.0
    k = 0
    while k < max_steps:
        S += rng.standard_exponential() * W[x]
        if S > t:
            return x, k, False
        x = nb[x, rng.integers(0, deg)]
        k += 1
    return x, k, True


@numba.njit(nogil=True, cache=True)
def _walk_occupation(nb, hold_mean, x0, horizon, mask, rng):
    deg = nb.shape[1]
    x = x0
    t = 0.0
    occ = 0.0
    while True:
        h = rng.standard_exponential() * hold_mean[x]
        if t + h >= horizon:
            if mask[x]:
                occ += horizon - t
            return occ
        if mask[x]:
            occ += h
        t += h
        x = nb[x, rng.integers(0, deg)]


@numba.njit(nogil=True, cache=True)
def _walk_occupation_many(nb, hold_mean, x0, horizon, masks, rng):
    # one path, occupation of each row of ``masks``
    deg = nb.shape[1]
    k = masks.shape[0]
    x = x0
    t = 0.0
    occ = np.zeros(k)
    while True:
        h = rng.standard_exponential() * hold_mean[x]
        last = t + h >= horizon
        if last:
            h = horizon - t
        for i in range(k):
            if masks[i, x]:
                occ[i] += h
        if last:
            return occ
        t += h
        x = nb[x, rng.integers(0, deg)]


@numba.njit(nogil=True, cache=True)
def _walk_until_occupation(nb, hold_mean, x0, mask, target, rng):
    # run until the time spent in mask reaches target; last in-mask segment clipped
    sites = np.empty(1024, np.int64)
    holds = np.empty(1024, np.float64)
    deg = nb.shape[1]
    x = x0
    occ = 0.0
    n = 0
    while True:
        h = rng.standard_exponential() * hold_mean[x]
        if mask[x]:
            if n == sites.size:
                sites, holds = _grow(sites, holds, n)
            sites[n] = x
            if occ + h >= target:
                holds[n] = target - occ
                return sites[: n + 1], holds[: n + 1]
            holds[n] = h
            n += 1
            occ += h
        x = nb[x, rng.integers(0, deg)]


# -- simulation ---------------------------------------------------------------


def _start(spec: TorusSpec, x0) -> int:
    return spec.flat(x0)


def _mask(spec: TorusSpec, sites) -> np.ndarray:
    m = np.zeros(spec.n_sites, dtype=np.bool_)
    idx = np.asarray([spec.flat(s) for s in sites], dtype=np.int64) if not isinstance(sites, np.ndarray) else sites
    m[np.asarray(idx, dtype=np.int64)] = True
    return m


def simulate_walk(cfg: WalkConfig, x0, horizon: float, replica: int = 0) -> Trajectory:
    """Path of the walk from ``x0`` on ``[0, horizon]`` (last holding clipped)."""
    if not horizon > 0.0:
        raise ValueError("horizon must be positive")
    rng = stream(cfg.seed, replica, "walk")
    s, h = _walk_path(cfg.spec.neighbor_table(), cfg.hold_mean, _start(cfg.spec, x0), float(horizon), rng)
    return Trajectory(s, h)


def simulate_clock_walk(cfg: WalkConfig, x0, t: float, replica: int = 0, max_steps: int = 10**9):
    """State at time ``t`` of the skeleton run through the clock process ``S_N``.

    Returns ``(site, skeleton_steps, censored)``.
    """
    rng = stream(cfg.seed, replica, "clock")
    x, k, cens = _clock_walk(cfg.spec.neighbor_table(), cfg.hold_mean, _start(cfg.spec, x0), float(t),
                             int(max_steps), rng)
    return int(x), int(k), bool(cens)


def hitting_time(traj: Trajectory, A) -> Hit:
    """``H(A)`` on a recorded path; censored at the path's total time."""
    inA = np.isin(traj.sites, np.asarray(list(A), dtype=np.int64))
    if not len(A):
        raise ValueError("A must be non-empty")
    k = np.flatnonzero(inA)
    if k.size == 0:
        return Hit(traj.total_time, True)
    return Hit(float(traj.holdings[: k[0]].sum()), False)


def return_time(traj: Trajectory, A) -> Hit:
    """``tau(A) = inf{t > T_1 : X_t in A}`` with ``T_1`` the first jump time."""
    if not len(A):
        raise ValueError("A must be non-empty")
    inA = np.isin(traj.sites, np.asarray(list(A), dtype=np.int64))
    k = np.flatnonzero(inA[1:])
    if k.size == 0:
        return Hit(traj.total_time, True)
    return Hit(float(traj.holdings[: k[0] + 1].sum()), False)


def occupation_time(traj: Trajectory, A, T: float | None = None) -> float:
    """Time spent in ``A`` during ``[0, T]``."""
    T = traj.total_time if T is None else float(T)
    if T > traj.total_time * (1 + 1e-12):
        raise ValueError("T exceeds the recorded path")
    ends = np.cumsum(traj.holdings)
    starts = ends - traj.holdings
    clipped = np.clip(np.minimum(ends, T) - starts, 0.0, None)
    inA = np.isin(traj.sites, np.asarray(list(A), dtype=np.int64))
    return float(clipped[inA].sum())


def trace(traj: Trajectory, F) -> Trajectory:
    """Trace of the path on ``F``: time outside ``F`` removed, repeat visits merged."""
    keep = np.isin(traj.sites, np.asarray(list(F), dtype=np.int64))
    if not keep.any():
        raise ValueError("path never visits F")
    s = traj.sites[keep]
    h = traj.holdings[keep]
    new = np.concatenate([[True], s[1:] != s[:-1]])
    group = np.cumsum(new) - 1
    merged = np.zeros(int(group[-1]) + 1)
    np.add.at(merged, group, h)
    return Trajectory(s[new], merged)


def estimate_trace_rates(paths, F) -> tuple[np.ndarray, np.ndarray]:
    """Pooled jump-rate estimates ``jumps(i->j) / time(i)`` for traced paths.

    Returns ``(rates, standard_errors)`` indexed by the sorted sites of ``F``.
    Rows with zero time are NaN. The standard error of a rate with ``n``
    jumps over time ``T`` is ``sqrt(n)/T``.
    """
    F = np.unique(np.asarray(list(F), dtype=np.int64))
    m = F.size
    jumps = np.zeros((m, m))
    time = np.zeros(m)
    for p in paths:
        idx = np.searchsorted(F, p.sites)
        if np.any(idx >= m) or np.any(F[np.minimum(idx, m - 1)] != p.sites):
            raise ValueError("path has sites outside F; trace it first")
        np.add.at(time, idx, p.holdings)
        np.add.at(jumps, (idx[:-1], idx[1:]), 1.0)
    np.fill_diagonal(jumps, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        rates = jumps / time[:, None]
        se = np.sqrt(jumps) / time[:, None]
    rates[time == 0] = np.nan
    se[time == 0] = np.nan
    return rates, se


def sample_hitting_times(cfg: WalkConfig, x0, A, replicas: int, horizon: float = math.inf,
                         max_steps: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Hitting times of ``A`` from ``x0`` over independent replicas.

    Returns ``(times, censored)``. ``max_steps`` caps skeleton steps; in
    ``d = 2`` it defaults to ``1000 N^2 log N``.
    """
    spec = cfg.spec
    nb = spec.neighbor_table()
    hold = cfg.hold_mean
    target = _mask(spec, A)
    x = _start(spec, x0)
    if max_steps is None:
        max_steps = int(1000 * spec.N**2 * math.log(spec.N)) if spec.d == 2 else 2**62

    def one(r):
        return _walk_hit(nb, hold, x, target, float(horizon), int(max_steps), stream(cfg.seed, r, "hit"))

    out = parallel_map(one, range(replicas))
    return np.array([o[0] for o in out]), np.array([o[1] for o in out])


def estimate_hitting_probability(spec: TorusSpec, x0, A, B, replicas: int, seed: int = 0,
                                 max_steps: int = 10**8) -> tuple[float, float]:
    """Skeleton-only Monte Carlo estimate of ``P_x0[H(A) < H(B)]`` with its SE."""
    nb = spec.neighbor_table()
    Am, Bm = _mask(spec, A), _mask(spec, B)
    x = _start(spec, x0)
    res = np.array([_skeleton_race(nb, x, Am, Bm, max_steps, stream(seed, r, "race")) for r in range(replicas)])
    if np.any(res < 0):
        raise RuntimeError("skeleton race censored; raise max_steps")
    return proportion_se(int(res.sum()), replicas)


def estimate_escape_probability(spec: TorusSpec, y, A, replicas: int, seed: int = 0,
                                max_steps: int = 10**8) -> tuple[float, float]:
    """Monte Carlo ``P_y[H(A) < tau(y)]`` via the skeleton, with its SE."""
    nb = spec.neighbor_table()
    Am = _mask(spec, A)
    x = _start(spec, y)
    res = np.array([_skeleton_return_race(nb, x, Am, max_steps, stream(seed, r, "escape")) for r in range(replicas)])
    if np.any(res < 0):
        raise RuntimeError("escape race censored; raise max_steps")
    return proportion_se(int(res.sum()), replicas)


def mean_occupation(cfg: WalkConfig, x0, A, T: float, replicas: int, purpose: str = "occupation"):
    """Monte Carlo mean and SE of the time spent in ``A`` during ``[0, T]``."""
    spec = cfg.spec
    nb = spec.neighbor_table()
    hold = cfg.hold_mean
    mask = _mask(spec, A)
    x = _start(spec, x0)

    def one(r):
        return _walk_occupation(nb, hold, x, float(T), mask, stream(cfg.seed, r, purpose))

    vals = np.array(parallel_map(one, range(replicas)))
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(replicas)) if replicas > 1 else float("nan")


def simulate_trace_walk(cfg: WalkConfig, x0, F, horizon: float, replica: int = 0) -> Trajectory:
    """Trace on ``F`` of the walk from ``x0``, run until ``horizon`` units of trace time."""
    spec = cfg.spec
    rng = stream(cfg.seed, replica, "trace-walk")
    s, h = _walk_until_occupation(spec.neighbor_table(), cfg.hold_mean, _start(spec, x0), _mask(spec, F),
                                  float(horizon), rng)
    return trace(Trajectory(s, h), F)


def stay_experiment(cfg: WalkConfig, j: int, t: float, ell: float, replicas: int,
                    max_steps: int | None = None) -> dict:
    """Estimate ``P[d(X(t), x_j) >= ell]`` for the walk started at the ``j``-th deepest trap.

    Uses the clock-process construction; ``d`` is the graph distance.
    Returns a dict with ``p``, ``se``, the 95% normal interval and the trap site.
    """
    spec = cfg.spec
    if spec.d != 2:
        raise ValueError("stay_experiment is defined for d = 2")
    xj = int(rank_traps(cfg.field, j)[j - 1])
    if ell > spec.d * (spec.N // 2):
        return {"p": 0.0, "se": 0.0, "ci": (0.0, 0.0), "site": xj, "censored": 0}
    nb = spec.neighbor_table()
    hold = cfg.hold_mean
    coords = spec.coord_array()
    if max_steps is None:
        max_steps = int(1000 * spec.N**2 * math.log(spec.N))

    def one(r):
        return _clock_walk(nb, hold, xj, float(t), int(max_steps), stream(cfg.seed, r, "stay"))

    out = parallel_map(one, range(replicas))
    ends = np.array([o[0] for o in out], dtype=np.int64)
    cens = int(sum(o[2] for o in out))
    gaps = np.abs(coords[ends] - coords[xj])
    dist = np.minimum(gaps, spec.N - gaps).sum(axis=1)
    p, se = proportion_se(int(np.count_nonzero(dist >= ell)), replicas)
    return {"p": p, "se": se, "ci": (p - 1.96 * se, p + 1.96 * se), "site": xj, "censored": cens}


# -- return frequency on Z^3 ------------------------------------------------------


@numba.njit(nogil=True, cache=True)
def _z3_returns(n, radius, rng):
    # per walk: 1 if it returns to 0 before |x| >= radius, else the exit radius
    ret = np.zeros(n, np.int8)
    exit_r = np.zeros(n)
    r2 = radius * radius
    for k in range(n):
        x = 0
        y = 0
        z = 0
        while True:
            j = rng.integers(0, 6)
            if j == 0:
                x += 1
            elif j == 1:
                x -= 1
            elif j == 2:
                y += 1
            elif j == 3:
                y -= 1
            elif j == 4:
                z += 1
            else:
                z -= 1
            if x == 0 and y == 0 and z == 0:
                ret[k] = 1
                break
            q = x * x + y * y + z * z
            if q >= r2:
                exit_r[k] = math.sqrt(q)
                break
    return ret, exit_r


def return_frequency_z3(replicas: int, radius: float = 30.0, seed: int = 0, chunks: int = 64) -> dict:
    """Monte Carlo return probability of the simple random walk on ``Z^3``.

    Each walk runs until it returns to the origin or first reaches Euclidean
    radius ``radius``. A walk stopped at ``x`` returns later with probability
    ``G(x)/G(0)``, where ``G(x) ~ 3/(2 pi |x|)`` and ``G(0) = 1/(1-F)``;
    solving for the return probability ``F`` gives
    ``F = (q + m)/(1 + m)`` with ``q`` the early-return fraction and ``m`` the
    mean of ``3/(2 pi |x|)`` over the stopped walks (zero for returned ones).
    Standard errors use the delta method.
    """
    if replicas < 2:
        raise ValueError("need at least 2 walks")
    sizes = np.full(chunks, replicas // chunks)
    sizes[: replicas % chunks] += 1
    sizes = sizes[sizes > 0]

    def one(c):
        return _z3_returns(int(sizes[c]), float(radius), stream(seed, c, "z3-return"))

    parts = parallel_map(one, range(sizes.size))
    a = np.concatenate([p[0] for p in parts]).astype(float)
    r = np.concatenate([p[1] for p in parts])
    b = np.where(a > 0, 0.0, 3.0 / (2.0 * np.pi * np.where(r > 0, r, 1.0)))
    q, m = a.mean(), b.mean()
    F = (q + m) / (1.0 + m)
    psi = (a - q) / (1.0 + m) + (b - m) * (1.0 - q) / (1.0 + m) ** 2
    se = float(psi.std(ddof=1) / math.sqrt(a.size))
    return {"return_prob": float(F), "se": se, "v3": float(1.0 - F), "early_return": float(q),
            "tail_term": float(m), "walks": int(a.size)}


# -- trajectory files ---------------------------------------------------------

TRAJ_MAGIC = b"TRAJ"
_HEADER = struct.Struct("<4sIII")
_RECORD = np.dtype([("site", "<u4"), ("holding", "<f8")])


class TrajectoryFileError(ValueError):
    pass


def dump_trajectory(traj: Trajectory, spec: TorusSpec, fh) -> None:
    """Write ``traj`` as a little-endian TRAJ stream to a binary file object."""
    rec = np.empty(len(traj), dtype=_RECORD)
    rec["site"] = traj.sites
    rec["holding"] = traj.holdings
    fh.write(_HEADER.pack(TRAJ_MAGIC, spec.d, spec.N, len(traj)))
    fh.write(rec.tobytes())


def load_trajectory(fh) -> tuple[Trajectory, TorusSpec | None]:
    head = fh.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise TrajectoryFileError("truncated header")
    magic, d, N, count = _HEADER.unpack(head)
    if magic != TRAJ_MAGIC:
        raise TrajectoryFileError(f"bad magic {magic!r}")
    payload = fh.read(count * _RECORD.itemsize)
    if len(payload) != count * _RECORD.itemsize:
        raise TrajectoryFileError(f"truncated payload: expected {count} records")
    rec = np.frombuffer(payload, dtype=_RECORD)
    try:
        spec = TorusSpec(int(d), int(N))
    except ValueError:
        spec = None
    return Trajectory(rec["site"].astype(np.int64), rec["holding"].astype(float)), spec


def trajectory_bytes(traj: Trajectory, spec: TorusSpec) -> bytes:
    buf = io.BytesIO()
    dump_trajectory(traj, spec, buf)
    return buf.getvalue()
