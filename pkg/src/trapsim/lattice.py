"""Geometry of the discrete torus ``T^d_N``.

Sites are handled internally as flat indices in ``[0, N**d)`` with row-major
packing (last coordinate varies fastest). The public helpers accept either a
flat index, a coordinate tuple, or (for ``d == 1``) a plain integer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

MAX_DIM = 3


class LatticeError(ValueError):
    """Invalid torus specification or site."""


@dataclass(frozen=True)
class TorusSpec:
    """The torus ``{0, ..., N-1}^d`` with nearest-neighbour adjacency.

    ``N == 2`` is accepted, but then ``x + e`` and ``x - e`` coincide and the
    neighbour multiset contains duplicates.
    """

    d: int
    N: int

    def __post_init__(self):
        if not isinstance(self.d, (int, np.integer)) or not 1 <= self.d <= MAX_DIM:
            raise LatticeError(f"dimension out of range: d={self.d} (need 1 <= d <= {MAX_DIM})")
        if not isinstance(self.N, (int, np.integer)) or self.N < 2:
            raise LatticeError(f"side length must be an integer >= 2, got N={self.N}")

    @property
    def n_sites(self) -> int:
        return self.N**self.d

    @property
    def degree(self) -> int:
        return 2 * self.d

    @cached_property
    def strides(self) -> tuple[int, ...]:
        return tuple(self.N ** (self.d - 1 - i) for i in range(self.d))

    def flat(self, x) -> int:
        """Flat index of a site given as int (d=1), flat int, or coordinate tuple."""
        if isinstance(x, (int, np.integer)):
            x = int(x)
            if not 0 <= x < self.n_sites:
                raise LatticeError(f"site index {x} outside [0, {self.n_sites})")
            return x
        coords = tuple(x)
        if len(coords) != self.d:
            raise LatticeError(f"expected {self.d} coordinates, got {len(coords)}")
        out = 0
        for c, s in zip(coords, self.strides):
            if not isinstance(c, (int, np.integer)) or not 0 <= c < self.N:
                raise LatticeError(f"coordinate {c!r} outside [0, {self.N})")
            out += int(c) * s
        return out

    def coords(self, x) -> tuple[int, ...]:
        """Coordinate tuple of a site."""
        i = self.flat(x)
        return tuple((i // s) % self.N for s in self.strides)

    def coord_array(self) -> np.ndarray:
        """``(n_sites, d)`` array of coordinates for every flat index."""
        idx = np.arange(self.n_sites)
        return np.stack([(idx // s) % self.N for s in self.strides], axis=1)

    def neighbor_table(self) -> np.ndarray:
        """``(n_sites, 2d)`` int64 table; column ``2i`` is ``+e_i``, ``2i+1`` is ``-e_i``."""
        return _neighbor_table(self.d, self.N)

    def _as_output(self, i: int):
        return i if self.d == 1 else self.coords(i)


def _neighbor_table(d: int, N: int) -> np.ndarray:
    n = N**d
    coords = np.indices((N,) * d).reshape(d, n).T
    strides = np.array([N ** (d - 1 - i) for i in range(d)], dtype=np.int64)
    flat = coords @ strides
    table = np.empty((n, 2 * d), dtype=np.int64)
    for i in range(d):
        up = (coords[:, i] + 1) % N
        down = (coords[:, i] - 1) % N
        table[:, 2 * i] = flat + (up - coords[:, i]) * strides[i]
        table[:, 2 * i + 1] = flat + (down - coords[:, i]) * strides[i]
    return table


def neighbors(spec: TorusSpec, x) -> list:
    """The ``2d`` neighbours of ``x``, ordered ``+e_1, -e_1, +e_2, -e_2, ...``.

    Sites are returned as ints for ``d == 1`` and as coordinate tuples otherwise.

    >>> neighbors(TorusSpec(1, 4), 0)
    [1, 3]
    >>> neighbors(TorusSpec(2, 3), (0, 0))
    [(1, 0), (2, 0), (0, 1), (0, 2)]
    """
    c = list(spec.coords(x))
    out = []
    for i in range(spec.d):
        for step in (1, -1):
            y = c.copy()
            y[i] = (y[i] + step) % spec.N
            out.append(y[0] if spec.d == 1 else tuple(y))
    return out


def _axis_gaps(spec: TorusSpec, x, y) -> np.ndarray:
    a = np.asarray(spec.coords(x))
    b = np.asarray(spec.coords(y))
    diff = np.abs(a - b)
    return np.minimum(diff, spec.N - diff)


def graph_distance(spec: TorusSpec, x, y) -> int:
    """Shortest-path (wrapped l1) distance between two sites."""
    return int(_axis_gaps(spec, x, y).sum())


def euclidean_distance(spec: TorusSpec, x, y) -> float:
    """``N`` times the Euclidean distance of ``x/N`` and ``y/N`` on the unit torus."""
    return float(math.sqrt(float((_axis_gaps(spec, x, y).astype(float) ** 2).sum())))


def cube_index(point, N: int):
    """Site whose cube ``prod_i [x_i/N, (x_i+1)/N)`` contains ``point``.

    Returns an int for a scalar point and a tuple for a sequence.
    """
    scalar = np.isscalar(point)
    p = np.atleast_1d(np.asarray(point, dtype=float))
    if p.ndim != 1 or not 1 <= p.size <= MAX_DIM:
        raise LatticeError(f"point must have 1..{MAX_DIM} coordinates")
    if np.any(p < 0.0) or np.any(p >= 1.0) or not np.all(np.isfinite(p)):
        raise LatticeError(f"point {point!r} outside [0, 1)^d")
    idx = np.minimum(np.floor(p * N).astype(np.int64), N - 1)
    return int(idx[0]) if scalar else tuple(int(v) for v in idx)


def cube_indices(points: np.ndarray, spec: TorusSpec) -> np.ndarray:
    """Vectorised :func:`cube_index` returning flat indices for ``(K, d)`` points."""
    pts = np.asarray(points, dtype=float).reshape(-1, spec.d)
    if pts.size and (pts.min() < 0.0 or pts.max() >= 1.0):
        raise LatticeError("points outside [0, 1)^d")
    idx = np.minimum(np.floor(pts * spec.N).astype(np.int64), spec.N - 1)
    return idx @ np.asarray(spec.strides, dtype=np.int64)


def distances_from(spec: TorusSpec, x, metric: str = "graph") -> np.ndarray:
    """Distance from ``x`` to every site, as a flat array."""
    c = spec.coord_array()
    diff = np.abs(c - np.asarray(spec.coords(x)))
    gaps = np.minimum(diff, spec.N - diff)
    if metric == "graph":
        return gaps.sum(axis=1)
    if metric == "euclidean":
        return np.sqrt((gaps.astype(float) ** 2).sum(axis=1))
    raise ValueError(f"unknown metric {metric!r}")
