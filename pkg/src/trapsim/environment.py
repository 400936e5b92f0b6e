"""Trap measures on the unit torus and their discretisation on ``T^d_N``.

A :class:`TrapMeasure` is a finite list of atoms plus an optional uniform
background density. The random alpha-stable environment is sampled as a
Poisson point process with intensity ``alpha * w**(-1-alpha) dx dw`` truncated
to ``w > w_min``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .lattice import TorusSpec, cube_indices
from .rng import stream


class NonPositiveEnvironmentError(ValueError):
    """A discretised field has a zero cell and nothing to fill it with."""


@dataclass(frozen=True)
class PppConfig:
    alpha: float
    w_min: float
    seed: int

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.w_min > 0.0:
            raise ValueError(f"w_min must be positive, got {self.w_min}")

    @property
    def expected_atoms(self) -> float:
        return self.w_min ** (-self.alpha)

    @property
    def expected_discarded_mass(self) -> float:
        """Mean total weight of the atoms below ``w_min`` that were dropped."""
        a = self.alpha
        return a / (1.0 - a) * self.w_min ** (1.0 - a)


def default_w_min(alpha: float, rel_tol: float = 1e-3) -> float:
    """Truncation level whose expected discarded mass is ``rel_tol``.

    The retained mass of a PPP environment is of order one, so this keeps the
    dropped shallow atoms below ``rel_tol`` of the measure on average.
    """
    return (rel_tol * (1.0 - alpha) / alpha) ** (1.0 / (1.0 - alpha))


@dataclass(frozen=True)
class TrapMeasure:
    """``W = sum_i w_i delta_{x_i} + b * Lebesgue`` on ``[0, 1)^d``."""

    d: int
    positions: np.ndarray
    weights: np.ndarray
    background: float = 0.0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(-1, self.d)
        w = np.asarray(self.weights, dtype=float).ravel()
        if pos.shape[0] != w.size:
            raise ValueError("positions and weights differ in length")
        if w.size and not np.all(w > 0.0):
            raise ValueError("atom weights must be strictly positive")
        if pos.size and (pos.min() < 0.0 or pos.max() >= 1.0):
            raise ValueError("atom positions must lie in [0, 1)^d")
        if self.background < 0.0:
            raise ValueError("background density must be >= 0")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_atoms(cls, atoms, d: int, background: float = 0.0, **meta) -> "TrapMeasure":
        """Build from ``[(position, weight), ...]``; positions are scalars when d=1."""
        pos = [np.atleast_1d(np.asarray(p, dtype=float)) for p, _ in atoms]
        w = [float(wt) for _, wt in atoms]
        pos = np.array(pos).reshape(-1, d) if pos else np.zeros((0, d))
        return cls(d, pos, np.array(w), float(background), dict(meta))

    @property
    def n_atoms(self) -> int:
        return int(self.weights.size)

    @property
    def total_mass(self) -> float:
        return math.fsum(self.weights.tolist()) + self.background


def sample_ppp_environment(cfg: PppConfig, d: int, background: float = 0.0) -> TrapMeasure:
    """Sample the truncated alpha-stable trap measure on ``[0, 1)^d``.

    The atom count is Poisson with mean ``w_min**-alpha``; positions are
    uniform and weights are ``w_min * U**(-1/alpha)``.
    """
    rng = stream(cfg.seed, 0, "environment")
    k = int(rng.poisson(cfg.expected_atoms))
    positions = rng.random((k, d))
    u = 1.0 - rng.random(k)  # in (0, 1]
    weights = cfg.w_min * u ** (-1.0 / cfg.alpha)
    meta = {
        "alpha": cfg.alpha,
        "w_min": cfg.w_min,
        "seed": cfg.seed,
        "expected_discarded_mass": cfg.expected_discarded_mass,
    }
    return TrapMeasure(d, positions, weights, float(background), meta)


@numba.njit(cache=True)
def _compensated_cells(cells, weights, n):
    # Neumaier summation per cell.
    s = np.zeros(n)
    c = np.zeros(n)
    for k in range(cells.size):
        i = cells[k]
        w = weights[k]
        t = s[i] + w
        if abs(s[i]) >= abs(w):
            c[i] += (s[i] - t) + w
        else:
            c[i] += (w - t) + s[i]
        s[i] = t
    return s + c


@dataclass(frozen=True)
class WField:
    """Cube masses ``W^N_x`` on the torus.

    ``values`` is the floored field used for rates; ``raw`` keeps the
    pre-floor masses, whose sum is ``total``.
    """

    spec: TorusSpec
    values: np.ndarray
    raw: np.ndarray
    floor: float
    total: float

    @classmethod
    def from_values(cls, spec: TorusSpec, values, floor: float = 0.0) -> "WField":
        v = np.asarray(values, dtype=float).ravel()
        if v.size != spec.n_sites:
            raise ValueError(f"expected {spec.n_sites} values, got {v.size}")
        if np.any(v < 0.0):
            raise ValueError("cube masses must be non-negative")
        out = np.where(v > 0.0, v, floor)
        if np.any(out <= 0.0):
            raise NonPositiveEnvironmentError("non-positive environment: zero cell with w_floor = 0")
        return cls(spec, out, v.copy(), float(floor), math.fsum(v.tolist()))

    @classmethod
    def uniform(cls, spec: TorusSpec, c: float = 1.0) -> "WField":
        return cls.from_values(spec, np.full(spec.n_sites, float(c)))

    @property
    def N(self) -> int:
        return self.spec.N

    @property
    def d(self) -> int:
        return self.spec.d

    @property
    def mass(self) -> float:
        """Total mass of the floored field (the normaliser of the stationary law)."""
        return math.fsum(self.values.tolist())


def discretize(W: TrapMeasure, spec: TorusSpec, w_floor: float | None = None) -> WField:
    """Cube masses ``W([x/N, (x+1)/N))`` with empty cubes raised to ``w_floor``.

    ``w_floor`` defaults to ``1e-9`` times the largest atom weight.
    """
    if W.d != spec.d:
        raise ValueError(f"measure is {W.d}-dimensional, torus is {spec.d}-dimensional")
    n = spec.n_sites
    if W.n_atoms:
        cells = cube_indices(W.positions, spec)
        raw = _compensated_cells(cells.astype(np.int64), W.weights, n)
    else:
        raw = np.zeros(n)
    if W.background > 0.0:
        raw = raw + W.background / n
    if w_floor is None:
        w_floor = 1e-9 * float(W.weights.max()) if W.n_atoms else 0.0
    if w_floor < 0.0:
        raise ValueError("w_floor must be >= 0")
    values = np.where(raw > 0.0, raw, w_floor)
    if np.any(values <= 0.0):
        raise NonPositiveEnvironmentError(
            "non-positive environment: empty cube with w_floor = 0 and no background"
        )
    return WField(spec, values, raw, float(w_floor), W.total_mass)


def tau_field(field: WField, alpha: float) -> np.ndarray:
    """Bouchaud depths ``tau^N_x = N**(d/alpha) * W^N_x``."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    return field.N ** (field.d / alpha) * field.values


def check_h1(field: WField, gamma0: float) -> float:
    """Regularity statistic ``N**-(2+gamma0) * sum_x 1/W^N_x``."""
    if gamma0 <= 0.0:
        raise ValueError("gamma0 must be positive")
    v = field.values
    if np.any(v <= 0.0):
        raise NonPositiveEnvironmentError("check_h1 needs a strictly positive field")
    return float(np.sum(1.0 / v) / field.N ** (2.0 + gamma0))


def rank_traps(field: WField, M: int) -> np.ndarray:
    """Flat indices of the ``M`` deepest cubes (ties: smaller index first)."""
    n = field.spec.n_sites
    if not 1 <= M <= n:
        raise ValueError(f"M must lie in [1, {n}], got {M}")
    order = np.lexsort((np.arange(n), -field.values))
    return order[:M]


# -- serialisation -----------------------------------------------------------


def environment_to_json(W: TrapMeasure, N: int | None = None, w_floor: float | None = None) -> str:
    """JSON document ``{d, N, alpha, w_min, seed, atoms, background, w_floor}``.

    Floats are written with ``repr`` precision, so a round trip is bit-exact.
    """
    doc = {
        "d": W.d,
        "N": N,
        "alpha": W.meta.get("alpha"),
        "w_min": W.meta.get("w_min"),
        "seed": W.meta.get("seed"),
        "atoms": [[p.tolist(), float(w)] for p, w in zip(W.positions, W.weights)],
        "background": W.background,
        "w_floor": w_floor,
    }
    return json.dumps(doc)


def environment_from_json(text: str) -> tuple[TrapMeasure, dict]:
    doc = json.loads(text)
    d = int(doc["d"])
    atoms = doc.get("atoms", [])
    pos = np.array([a[0] for a in atoms], dtype=float).reshape(-1, d)
    w = np.array([a[1] for a in atoms], dtype=float)
    meta = {k: doc.get(k) for k in ("alpha", "w_min", "seed") if doc.get(k) is not None}
    W = TrapMeasure(d, pos, w, float(doc.get("background", 0.0)), meta)
    return W, {"N": doc.get("N"), "w_floor": doc.get("w_floor")}
