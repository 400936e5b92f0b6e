"""Potential theory of the trap walk on ``T^d_N`` and of its skeleton.

The trap walk only rescales the graph Laplacian by ``1/W^N_x``, so every
harmonic function, hitting probability and skeleton capacity is obtained from
a Dirichlet problem for the plain graph Laplacian ``2d I - Adj``. Chain
quantities are converted with ``Cap_N = Cap_Y / W(T^d)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .environment import WField
from .lattice import TorusSpec

DENSE_LIMIT = 4096
CG_RTOL = 1e-12

# Escape probability of the simple random walk on Z^3 (Watson's integral),
# 1 - 1/1.516386059151978...
V3 = 0.6594626704407713


class SolverError(RuntimeError):
    """A linear solve failed to reach its residual target."""


@dataclass(frozen=True)
class ChainSpec:
    """Exact description of the trap walk: holding rates and stationary law."""

    spec: TorusSpec
    field: WField
    lam: np.ndarray
    nu: np.ndarray
    mass: float

    @classmethod
    def from_field(cls, field: WField) -> "ChainSpec":
        v = field.values
        mass = field.mass
        return cls(field.spec, field, 1.0 / v, v / mass, mass)

    @classmethod
    def uniform(cls, spec: TorusSpec, c: float = 1.0) -> "ChainSpec":
        return cls.from_field(WField.uniform(spec, c))

    def edge_rate(self, x: int, y: int) -> float:
        """Jump rate ``x -> y`` (per neighbour slot)."""
        nb = self.spec.neighbor_table()[x]
        return float(np.count_nonzero(nb == y)) * self.lam[x] / self.spec.degree


@dataclass(frozen=True)
class DirichletSolution:
    A: np.ndarray
    B: np.ndarray
    f: np.ndarray
    residual: float


# -- sets and matrices -------------------------------------------------------


def site_set(spec: TorusSpec, sites) -> np.ndarray:
    """Flat indices for an iterable of sites (ints or coordinate tuples)."""
    if isinstance(sites, np.ndarray) and sites.dtype.kind in "iu":
        out = sites.astype(np.int64).ravel()
        if out.size and (out.min() < 0 or out.max() >= spec.n_sites):
            raise ValueError("site index out of range")
    else:
        out = np.array([spec.flat(s) for s in sites], dtype=np.int64)
    return np.unique(out)


def adjacency(spec: TorusSpec) -> sp.csr_matrix:
    """Neighbour-count matrix of the torus (entries 2 when N == 2)."""
    nb = spec.neighbor_table()
    n = spec.n_sites
    rows = np.repeat(np.arange(n), spec.degree)
    A = sp.csr_matrix((np.ones(rows.size), (rows, nb.ravel())), shape=(n, n))
    A.sum_duplicates()
    return A


def graph_laplacian(spec: TorusSpec) -> sp.csr_matrix:
    """``2d I - Adj``: symmetric, positive semi-definite, kernel = constants."""
    return (sp.identity(spec.n_sites, format="csr") * spec.degree - adjacency(spec)).tocsr()


def _spd_solve(K: sp.spmatrix, b: np.ndarray) -> np.ndarray:
    n = K.shape[0]
    if n == 0:
        return np.zeros(0)
    if n <= DENSE_LIMIT:
        return sla.solve(K.toarray(), b, assume_a="pos")
    diag = K.diagonal()
    precond = spla.LinearOperator((n, n), matvec=lambda r: r / diag, dtype=float)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros(n)
    x, info = spla.cg(K, b, rtol=CG_RTOL, atol=0.0, M=precond, maxiter=20 * n)
    if info != 0:
        res = float(np.linalg.norm(K @ x - b) / bnorm)
        raise SolverError(f"conjugate gradient stopped (info={info}) at relative residual {res:.3e}")
    return x


def solve_dirichlet(spec: TorusSpec, fixed: np.ndarray, values: np.ndarray, source=None,
                    lap: sp.csr_matrix | None = None) -> tuple[np.ndarray, float]:
    """Solve ``(2d I - Adj) f = source`` off ``fixed`` with ``f[fixed] = values``.

    Returns the full solution and the max-norm residual on the free sites.
    """
    n = spec.n_sites
    L = graph_laplacian(spec) if lap is None else lap
    f = np.zeros(n)
    f[fixed] = values
    free = np.ones(n, dtype=bool)
    free[fixed] = False
    idx = np.flatnonzero(free)
    if idx.size == 0:
        return f, 0.0
    rhs = -(L[idx][:, fixed] @ f[fixed])
    if source is not None:
        rhs = rhs + np.broadcast_to(source, (n,))[idx]
    K = L[idx][:, idx]
    f[idx] = _spd_solve(K.tocsr(), rhs)
    r = L @ f
    if source is not None:
        r = r - np.broadcast_to(source, (n,))
    residual = float(np.max(np.abs(r[idx])))
    scale = max(1.0, float(np.max(np.abs(rhs))))
    if residual > 1e-10 * spec.degree * scale:
        raise SolverError(f"Dirichlet solve residual {residual:.3e} above tolerance")
    return f, residual


# -- harmonic functions and capacities ----------------------------------------


def _spec_of(chain) -> TorusSpec:
    return chain if isinstance(chain, TorusSpec) else chain.spec


def harmonic(chain, A, B) -> DirichletSolution:
    """``f(x) = P_x[H(A) < H(B)]``: harmonic off ``A u B``, 1 on ``A``, 0 on ``B``."""
    spec = _spec_of(chain)
    A = site_set(spec, A)
    B = site_set(spec, B)
    if A.size == 0 or B.size == 0:
        raise ValueError("A and B must be non-empty")
    if np.intersect1d(A, B).size:
        raise ValueError("A and B must be disjoint")
    fixed = np.concatenate([A, B])
    vals = np.concatenate([np.ones(A.size), np.zeros(B.size)])
    f, res = solve_dirichlet(spec, fixed, vals)
    return DirichletSolution(A, B, f, res)


def dirichlet_sum(spec: TorusSpec, f: np.ndarray) -> float:
    """``(1/4d) sum_x sum_{y~x} (f(y) - f(x))**2``."""
    nb = spec.neighbor_table()
    diffs = f[nb] - f[:, None]
    return float(np.sum(diffs**2) / (4 * spec.d))


def capacity_skeleton(chain, A, B) -> float:
    """Capacity between ``A`` and ``B`` for the discrete-time skeleton walk."""
    spec = _spec_of(chain)
    sol = harmonic(spec, A, B)
    return dirichlet_sum(spec, sol.f)


def capacity_chain(chain: ChainSpec, A, B) -> float:
    """Capacity for the trap walk: skeleton capacity over ``W(T^d)``."""
    return capacity_skeleton(chain.spec, A, B) / chain.mass


def dirichlet_form(chain: ChainSpec, f: np.ndarray) -> float:
    """``D(f) = -sum_x nu(x) f(x) (L f)(x)`` for the trap-walk generator ``L``."""
    nb = chain.spec.neighbor_table()
    Lf = chain.lam * (f[nb].sum(axis=1) - chain.spec.degree * f) / chain.spec.degree
    return float(-np.sum(chain.nu * f * Lf))


def trace_rates_exact(chain: ChainSpec, F) -> np.ndarray:
    """Jump rates of the trace of the walk on ``F`` (zero diagonal).

    ``r(x, y) = lam(x) * P_x[H(y) < tau(F minus y)]``, evaluated as
    ``lam(x)/(2d) * sum_{z~x} h_y(z)`` with ``h_y = P[H(y) < H(F minus y)]``.
    Rows and columns follow the sorted order of ``F`` unless ``F`` is an
    ndarray, in which case its order is kept.
    """
    spec = chain.spec
    order = np.asarray(F, dtype=np.int64).ravel() if isinstance(F, np.ndarray) else site_set(spec, F)
    if np.unique(order).size != order.size:
        raise ValueError("F contains repeated sites")
    m = order.size
    if m < 2:
        raise ValueError("trace rates need |F| >= 2")
    nb = spec.neighbor_table()
    lap = graph_laplacian(spec)
    R = np.zeros((m, m))
    for j, y in enumerate(order):
        others = np.delete(order, j)
        fixed = np.concatenate([[y], others])
        vals = np.concatenate([[1.0], np.zeros(m - 1)])
        h, _ = solve_dirichlet(spec, fixed, vals, lap=lap)
        for i, x in enumerate(order):
            if i != j:
                R[i, j] = chain.lam[x] * h[nb[x]].sum() / spec.degree
    return R


def generator_from_rates(R: np.ndarray) -> np.ndarray:
    Q = np.array(R, dtype=float)
    np.fill_diagonal(Q, 0.0)
    Q[np.diag_indices_from(Q)] = -Q.sum(axis=1)
    return Q


def expected_hitting_identity(chain: ChainSpec, F, y, A) -> tuple[float, float]:
    """Both sides of ``E^F_y[H(A)] = Cap(y,A)^-1 sum_{z in F} nu(z) P_z[H(y) < H(A)]``.

    The left side solves the hitting system of the trace chain built from
    :func:`trace_rates_exact`; the right side uses chain capacities and a
    harmonic solve on the full torus.
    """
    spec = chain.spec
    F = site_set(spec, F)
    A = site_set(spec, A)
    y = spec.flat(y)
    if not np.all(np.isin(A, F)) or y not in F or y in A:
        raise ValueError("need A subset of F and y in F minus A")
    Q = generator_from_rates(trace_rates_exact(chain, F))
    free = ~np.isin(F, A)
    u = np.zeros(F.size)
    u[free] = np.linalg.solve(Q[np.ix_(free, free)], -np.ones(int(free.sum())))
    lhs = float(u[np.searchsorted(F, y)])
    h = harmonic(spec, [y], A).f
    rhs = float(np.sum(chain.nu[F] * h[F]) / capacity_chain(chain, [y], A))
    return lhs, rhs


def escape_identity(chain: ChainSpec, y, A) -> tuple[float, float]:
    """Both sides of ``P_y[H(A) < tau(y)] = Cap(A, y) / (lam(y) nu(y))``."""
    spec = chain.spec
    y = spec.flat(y)
    A = site_set(spec, A)
    if y in A:
        raise ValueError("y must not belong to A")
    nb = spec.neighbor_table()
    g = harmonic(spec, A, [y]).f
    lhs = float(g[nb[y]].sum() / spec.degree)
    rhs = capacity_chain(chain, A, [y]) / (chain.lam[y] * chain.nu[y])
    return lhs, float(rhs)


def mean_hitting_torus(chain, x, y, clock: str = "skeleton") -> float:
    """Exact ``E_x[H(y)]``.

    ``clock="skeleton"`` counts steps of the discrete walk; ``clock="chain"``
    gives the continuous-time trap walk (mean holding ``W^N_z`` at ``z``).
    """
    spec = _spec_of(chain)
    x = spec.flat(x)
    y = spec.flat(y)
    if x == y:
        return 0.0
    if clock == "skeleton":
        source = float(spec.degree)
    elif clock == "chain":
        if isinstance(chain, TorusSpec):
            raise ValueError("chain clock needs a ChainSpec")
        source = spec.degree * chain.field.values
    else:
        raise ValueError(f"unknown clock {clock!r}")
    u, _ = solve_dirichlet(spec, np.array([y]), np.array([0.0]), source=source)
    return float(u[x])


def hitting_split(chain, traps, starts=None) -> np.ndarray:
    """``P_z[H(x_i) < H(traps minus x_i)]`` for every trap ``x_i``.

    Returns an array of shape ``(len(starts), M)`` (all sites if ``starts`` is
    None), columns in the given trap order.
    """
    spec = _spec_of(chain)
    traps = np.asarray([spec.flat(t) for t in traps], dtype=np.int64)
    lap = graph_laplacian(spec)
    cols = []
    for i, x in enumerate(traps):
        fixed = np.concatenate([[x], np.delete(traps, i)])
        vals = np.concatenate([[1.0], np.zeros(traps.size - 1)])
        f, _ = solve_dirichlet(spec, fixed, vals, lap=lap)
        cols.append(f)
    out = np.stack(cols, axis=1)
    if starts is None:
        return out
    return out[np.asarray([spec.flat(s) for s in starts], dtype=np.int64)]


# -- Green's functions on boxes ------------------------------------------------


def box_laplacian(d: int, L: int) -> sp.csr_matrix:
    """Dirichlet graph Laplacian on ``{-L..L}^d`` (walk killed on leaving the box)."""
    m = 2 * L + 1
    T = sp.diags([-np.ones(m - 1), 2 * np.ones(m), -np.ones(m - 1)], [-1, 0, 1], format="csr")
    I = sp.identity(m, format="csr")
    K = sp.csr_matrix((m**d, m**d))
    for i in range(d):
        term = None
        for j in range(d):
            factor = T if j == i else I
            term = factor if term is None else sp.kron(term, factor, format="csr")
        K = K + term
    return K.tocsr()


def box_green_center(d: int, L: int, method: str = "solve") -> float:
    """Expected visits to the centre of ``{-L..L}^d`` before exit, from the centre.

    ``method="solve"`` solves ``(I - P_kill) g = e_0``; ``method="spectral"``
    sums the sine-series representation of the same matrix inverse.
    """
    if L < 1:
        raise ValueError("box half-width must be >= 1")
    m = 2 * L + 1
    if method == "spectral":
        k = np.arange(1, m + 1, 2)  # only odd modes are non-zero at the centre
        lam1 = 2.0 - 2.0 * np.cos(np.pi * k / (m + 1))
        grids = np.meshgrid(*([lam1] * d), indexing="ij", sparse=True)
        total = sum(grids)
        norm = (2.0 / (m + 1)) ** d
        return float(2 * d * norm * np.sum(1.0 / total))
    if method != "solve":
        raise ValueError(f"unknown method {method!r}")
    K = box_laplacian(d, L)
    b = np.zeros(m**d)
    centre = sum(L * m**i for i in range(d))
    b[centre] = 2.0 * d
    g = _spd_solve(K, b)
    res = float(np.max(np.abs(K @ g - b)))
    if res > 1e-10 * 2 * d:
        raise SolverError(f"box Green solve residual {res:.3e}")
    return float(g[centre])


def green_box_2d(l: int, method: str = "solve") -> float:
    """Expected visits to the centre of a ``(2l+1)^2`` box before exit."""
    return box_green_center(2, l, method)


def escape_probability_vd(d: int, L: int, extrapolate: bool = True, method: str = "solve") -> float:
    """Escape probability ``v_d`` of the simple random walk on ``Z^d``.

    Without extrapolation this is ``1/G_L(0,0)`` for the box of half-width
    ``L``. With extrapolation, ``G`` is fitted as ``G_inf + a/L + b/L**2``
    through the boxes ``L/4, L/2, L`` and ``1/G_inf`` is returned.
    """
    if d != 3:
        raise ValueError("escape_probability_vd supports d = 3 only")
    if L < 8:
        raise ValueError("box half-width L must be >= 8")
    if not extrapolate:
        return 1.0 / box_green_center(d, L, method)
    Ls = [L // 4, L // 2, L]
    if Ls[0] < 2:
        raise ValueError("L too small to extrapolate")
    G = [box_green_center(d, l, method) for l in Ls]
    return 1.0 / richardson_limit(Ls, G)


def richardson_limit(Ls, values) -> float:
    """Constant term of the polynomial in ``1/L`` interpolating ``values``."""
    Ls = np.asarray(Ls, dtype=float)
    X = np.vander(1.0 / Ls, len(Ls), increasing=True)
    coef = np.linalg.solve(X, np.asarray(values, dtype=float))
    return float(coef[0])


def effective_v(d: int) -> float:
    """Limit rate constant: ``v_3`` for d = 3 and ``pi/2`` for d = 2."""
    if d == 3:
        return V3
    if d == 2:
        return math.pi / 2
    raise ValueError("limit constants are defined for d = 2 and d = 3")
