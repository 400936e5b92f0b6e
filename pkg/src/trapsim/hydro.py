"""Independent particles in a 1-d trap environment and their mean-field equation.

Each particle jumps to each neighbour at rate ``N / (2 W^N_x)`` (time sped up
by ``N^2``), or ``N^(1+1/alpha) / (2 tau^N_x)`` in Bouchaud mode. The mean
density ``u_t(x) = E[eta_t(x)] / (N^gamma W^N_x)`` solves the lattice
Krein-Feller equation ``du/dt = c(x) * (u(x+1) - 2u(x) + u(x-1))`` with ``c``
the per-direction rate, which :func:`solve_master` integrates.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from typing import Callable

import numba
import numpy as np
from scipy.integrate import trapezoid

from .environment import WField, tau_field
from .rng import parallel_map, stream
from .walk import Trajectory, _grow


@dataclass(frozen=True)
class HydroConfig:
    field: WField
    gamma: float
    u0: Callable
    horizon: float = 1.0
    bouchaud: bool = False
    alpha: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.field.d != 1:
            raise ValueError("hydrodynamics is implemented for d = 1")
        if not self.gamma > 0.0:
            raise ValueError("gamma must be positive")
        if self.bouchaud and (self.alpha is None or not 0.0 < self.alpha < 1.0):
            raise ValueError("Bouchaud mode needs alpha in (0, 1)")

    @property
    def N(self) -> int:
        return self.field.N

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.N) / self.N

    @property
    def rate(self) -> np.ndarray:
        """Per-direction jump rate at each site."""
        N = self.N
        if self.bouchaud:
            return N ** (1.0 + 1.0 / self.alpha) / (2.0 * tau_field(self.field, self.alpha))
        return N / (2.0 * self.field.values)

    def u0_values(self) -> np.ndarray:
        u = np.asarray(self.u0(self.x), dtype=float) * np.ones(self.N)
        if np.any(u < 0.0) or not np.all(np.isfinite(u)):
            raise ValueError("u0 must be finite and non-negative")
        return u


@dataclass
class DensityField:
    times: np.ndarray
    u: np.ndarray
    conserved_mass: np.ndarray
    steps: int = 0

    def at(self, t: float) -> np.ndarray:
        k = int(np.argmin(np.abs(self.times - t)))
        if not math.isclose(self.times[k], t, rel_tol=1e-12, abs_tol=1e-14):
            raise KeyError(f"time {t} not on the output grid")
        return self.u[k]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "u"])
            for t, row in zip(self.times, self.u):
                for x, val in enumerate(row):
                    w.writerow([repr(float(t)), x, repr(float(val))])

    def to_bytes(self) -> bytes:
        """Header ``<QQ (N, n_times)``, then rows ``[t, u(0), ..., u(N-1)]`` as ``<f8``."""
        n_times, N = self.u.shape
        body = np.column_stack([self.times, self.u]).astype("<f8")
        return struct.pack("<QQ", N, n_times) + body.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "DensityField":
        N, n_times = struct.unpack_from("<QQ", data)
        body = np.frombuffer(data, dtype="<f8", offset=16)
        if body.size != n_times * (N + 1):
            raise ValueError("truncated density payload")
        body = body.reshape(n_times, N + 1)
        return cls(body[:, 0].copy(), body[:, 1:].copy(), np.full(n_times, np.nan))


# -- particles ----------------------------------------------------------------


def sample_initial(cfg: HydroConfig, replica: int = 0) -> np.ndarray:
    """Independent ``Poisson(u0(x/N) N^gamma W^N_x)`` occupation numbers."""
    lam = cfg.u0_values() * cfg.N**cfg.gamma * cfg.field.values
    return stream(cfg.seed, replica, "initial").poisson(lam).astype(np.int64)


@numba.njit(nogil=True, cache=True)
def _run_particles(eta0, hold, T, K, rng):
    n = eta0.size
    final = np.zeros(n, np.int64)
    integral = 0.0
    for x0 in range(n):
        for _ in range(eta0[x0]):
            x = x0
            t = 0.0
            while True:
                h = rng.standard_exponential() * hold[x]
                if t + h >= T:
                    integral += K[x] * (T - t)
                    break
                integral += K[x] * h
                t += h
                if rng.random() < 0.5:
                    x = x + 1 if x + 1 < n else 0
                else:
                    x = x - 1 if x > 0 else n - 1
            final[x] += 1
    return final, integral


@numba.njit(nogil=True, cache=True)
def _one_particle_path(x0, n, hold, T, rng):
    sites = np.empty(256, np.int64)
    holds = np.empty(256, np.float64)
    x = x0
    t = 0.0
    k = 0
    while True:
        h = rng.standard_exponential() * hold[x]
        if k == sites.size:
            sites, holds = _grow(sites, holds, k)
        sites[k] = x
        if t + h >= T:
            holds[k] = T - t
            return sites[: k + 1], holds[: k + 1]
        holds[k] = h
        k += 1
        t += h
        if rng.random() < 0.5:
            x = x + 1 if x + 1 < n else 0
        else:
            x = x - 1 if x > 0 else n - 1


def simulate_particles(cfg: HydroConfig, eta0, T: float, replica: int = 0, record: bool = False,
                       kernel=None):
    """Evolve independent particles from ``eta0`` for time ``T``.

    Returns the configuration at ``T``. With ``record=True`` also returns one
    :class:`Trajectory` per particle; with ``kernel`` (an array over sites)
    also returns ``int_0^T sum_x kernel(x) eta_t(x) dt``.
    """
    eta0 = np.asarray(eta0, dtype=np.int64)
    hold = 1.0 / (2.0 * cfg.rate)
    rng = stream(cfg.seed, replica, "particles")
    if record:
        paths = []
        final = np.zeros(cfg.N, dtype=np.int64)
        for x0 in np.repeat(np.arange(cfg.N), eta0):
            s, h = _one_particle_path(int(x0), cfg.N, hold, float(T), rng)
            paths.append(Trajectory(s, h))
            final[s[-1]] += 1
        return final, paths
    K = np.zeros(cfg.N) if kernel is None else np.asarray(kernel, dtype=float)
    final, integral = _run_particles(eta0, hold, float(T), K, rng)
    if kernel is not None:
        return final, float(integral)
    return final


def empirical_measure(eta, gamma: float, H) -> float:
    """``<pi^N, H> = N^-gamma sum_x H(x/N) eta(x)``."""
    eta = np.asarray(eta, dtype=float)
    N = eta.size
    h = np.asarray(H(np.arange(N) / N), dtype=float) * np.ones(N)
    return float(np.dot(h, eta) / N**gamma)


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(5)


def spacetime_measure(paths, T: float, G, field: WField, gamma: float) -> float:
    """``int_0^T N^-(1+gamma) sum_x G(t, x/N) eta_t(x) / W^N_x dt`` from particle paths.

    Each constant piece is integrated with 5-point Gauss-Legendre in time,
    which is exact for ``G`` polynomial of degree <= 9 in ``t``.
    """
    N = field.N
    total = 0.0
    for p in paths:
        ends = np.minimum(np.cumsum(p.holdings), T)
        starts = np.concatenate([[0.0], ends[:-1]])
        keep = ends > starts
        a, b, s = starts[keep], ends[keep], p.sites[keep]
        half = 0.5 * (b - a)
        mid = 0.5 * (a + b)
        t = mid[:, None] + half[:, None] * _GL_NODES[None, :]
        x = np.broadcast_to((s / N)[:, None], t.shape)
        g = np.asarray(G(t, x), dtype=float) * np.ones_like(t)
        vals = (g * _GL_WEIGHTS).sum(axis=1) * half
        total += float(np.sum(vals / field.values[s]))
    return total / N ** (1.0 + gamma)


# -- master equation ----------------------------------------------------------


@numba.njit(cache=True)
def _tridiag(a, off, rhs):
    # symmetric tridiagonal (no wrap) with diagonal a and constant off-diagonal
    n = a.size
    cp = np.empty(n)
    dp = np.empty(n)
    cp[0] = off / a[0]
    dp[0] = rhs[0] / a[0]
    for i in range(1, n):
        m = a[i] - off * cp[i - 1]
        cp[i] = off / m
        dp[i] = (rhs[i] - off * dp[i - 1]) / m
    x = np.empty(n)
    x[n - 1] = dp[n - 1]
    for i in range(n - 2, -1, -1):
        x[i] = dp[i] - cp[i] * x[i + 1]
    return x


@numba.njit(cache=True)
def cyclic_solve(a, off, rhs):
    """Solve the periodic tridiagonal system ``a_i x_i + off (x_{i-1} + x_{i+1}) = rhs_i``.

    Sherman-Morrison correction of the non-periodic system; needs ``n >= 3``.
    """
    n = a.size
    g = -a[0]
    ab = a.copy()
    ab[0] = a[0] - g
    ab[n - 1] = a[n - 1] - off * off / g
    x = _tridiag(ab, off, rhs)
    u = np.zeros(n)
    u[0] = g
    u[n - 1] = off
    z = _tridiag(ab, off, u)
    vx = x[0] + off / g * x[n - 1]
    vz = z[0] + off / g * z[n - 1]
    return x - (vx / (1.0 + vz)) * z


@numba.njit(cache=True)
def _ie_step(u, inv_c, dt):
    # (diag(1/c) - dt * Laplacian) u_new = u / c
    a = inv_c + 2.0 * dt
    return cyclic_solve(a, -dt, u * inv_c)


@numba.njit(cache=True)
def _integrate(u0, inv_c, t_out, tol, dt0, dt_max, max_steps):
    n_out = t_out.size
    out = np.empty((n_out, u0.size))
    u = u0.copy()
    t = 0.0
    dt = dt0
    k = 0
    steps = 0
    while k < n_out and t_out[k] <= 0.0:
        out[k] = u
        k += 1
    while k < n_out:
        if steps >= max_steps:
            return out, steps, False
        h = min(dt, t_out[k] - t)
        full = _ie_step(u, inv_c, h)
        half = _ie_step(_ie_step(u, inv_c, 0.5 * h), inv_c, 0.5 * h)
        scale = max(1.0, np.max(np.abs(half)))
        err = np.max(np.abs(half - full)) / scale
        if err <= tol or h <= 1e-15:
            u = half
            t += h
            steps += 1
            if t >= t_out[k] * (1.0 - 1e-14):
                t = t_out[k]
                out[k] = u
                k += 1
        fac = 0.9 * math.sqrt(tol / err) if err > 0.0 else 2.0
        dt = min(dt_max, h * min(2.0, max(0.2, fac)))
    return out, steps, True


class SolverConvergenceError(RuntimeError):
    pass


def solve_master(cfg: HydroConfig, times=None, local_tol: float = 1e-12, dt0: float = 1e-9,
                 dt_max: float | None = None, max_steps: int = 50_000_000) -> DensityField:
    """Integrate the mean-density equation with adaptive implicit Euler.

    Each step solves one periodic tridiagonal system per stage (step doubling
    gives the local error estimate; the two half steps are kept). Returns the
    density at ``times`` (default: 101 equispaced points on ``[0, horizon]``)
    and the conserved mass ``sum_x N u_t(x) / (2 c_x)``, which is
    ``sum_x W^N_x u_t(x)`` (in Bouchaud mode up to rounding).
    """
    if cfg.N < 3:
        raise ValueError("solver needs N >= 3")
    times = np.linspace(0.0, cfg.horizon, 101) if times is None else np.asarray(times, dtype=float)
    if np.any(np.diff(times) < 0) or times[0] < 0:
        raise ValueError("output times must be sorted and non-negative")
    inv_c = 1.0 / cfg.rate
    dt_max = float(times[-1]) if dt_max is None else dt_max
    u0 = cfg.u0_values()
    out, steps, ok = _integrate(u0, inv_c, times, float(local_tol), float(dt0), float(max(dt_max, 1e-300)),
                                int(max_steps))
    if not ok:
        raise SolverConvergenceError(f"step budget exhausted after {steps} steps")
    mass = (out * inv_c[None, :]).sum(axis=1) * 0.5 * cfg.N
    return DensityField(times, out, mass, steps)


def master_generator(cfg: HydroConfig) -> np.ndarray:
    """Dense matrix of ``u -> c * Laplacian(u)`` (for small-N checks)."""
    N = cfg.N
    c = cfg.rate
    A = np.zeros((N, N))
    for x in range(N):
        A[x, x] -= 2 * c[x]
        A[x, (x + 1) % N] += c[x]
        A[x, (x - 1) % N] += c[x]
    return A


def discrete_energy(u: np.ndarray) -> float:
    """``sum_x N (u(x+1) - u(x))^2``."""
    N = u.size
    return float(N * np.sum((np.roll(u, -1) - u) ** 2))


def weak_form_residual(cfg: HydroConfig, density: DensityField, G, dG_dt, dG_dx) -> float:
    """Residual of the weak formulation for a test function vanishing at the final time.

    ``<G_0,u_0>_W + int <dG/dt, u_t>_W dt - 1/2 int <dG/dx, du/dx> dt`` with the
    lattice pairings ``<f, g>_W = sum_x f(x/N) g(x) W_x`` and
    ``<f', u'> = sum_x f'((x+1/2)/N) (u(x+1) - u(x))``; time integrals use the
    trapezoidal rule on the density's output grid.
    """
    N = cfg.N
    x = cfg.x
    xm = x + 0.5 / N
    W = N / (2.0 * cfg.rate)
    t = density.times
    u = density.u
    pair_t = np.array([np.sum(dG_dt(tk, x) * uk * W) for tk, uk in zip(t, u)])
    grad = np.array([np.sum(dG_dx(tk, xm) * (np.roll(uk, -1) - uk)) for tk, uk in zip(t, u)])
    lhs = float(np.sum(G(t[0], x) * u[0] * W)) + float(trapezoid(pair_t, t))
    rhs = 0.5 * float(trapezoid(grad, t))
    return abs(lhs - rhs)


# -- comparisons and diagnostics ----------------------------------------------


def hydro_comparison(cfg: HydroConfig, H, t: float, replicas: int, density: DensityField | None = None):
    """Monte Carlo ``E<pi^N_t, H>`` against ``sum_x H(x/N) u_t(x) W^N_x``.

    Returns ``(mc_mean, mc_se, ode_value)``. Independent particles make the two
    equal in expectation for every ``N``.
    """
    def one(r):
        eta0 = sample_initial(cfg, r)
        eta_t = eta0 if t == 0 else simulate_particles(cfg, eta0, t, replica=r)
        return empirical_measure(eta_t, cfg.gamma, H)

    vals = np.array(parallel_map(one, range(replicas)))
    if density is None:
        density = solve_master(cfg, times=np.array([0.0, t]) if t > 0 else np.array([0.0]))
    u_t = density.at(t)
    W = cfg.field.values
    h = np.asarray(H(cfg.x), dtype=float) * np.ones(cfg.N)
    ode = float(np.sum(h * u_t * W))
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(replicas)), ode


def two_blocks_kernel(field: WField, G, ell: int) -> np.ndarray:
    """Per-site coefficient ``K`` with ``sum_x G{eta/W - M^ell/W_N(x,ell)} = sum_y K(y) eta(y)``.

    Blocks are ``{x+1, ..., x+ell}``.
    """
    N = field.N
    W = field.values
    g = np.asarray(G(np.arange(N) / N), dtype=float) * np.ones(N)
    cs = np.concatenate([[0.0], np.cumsum(np.concatenate([W, W]))])
    x = np.arange(N)
    WB = cs[x + 1 + ell] - cs[x + 1]  # W_N(x, ell)
    coef = g / WB
    K = g / W
    for k in range(1, ell + 1):
        K -= np.roll(coef, k)
    return K


def two_blocks_diagnostic(cfg: HydroConfig, G, epsilons, replicas: int, T: float | None = None) -> list[dict]:
    """Monte Carlo two-blocks statistic for each block fraction ``epsilon``.

    For time-independent ``G`` (a function of ``x``), estimates
    ``E| int_0^T N^-(1+gamma) sum_x G(x/N) {eta_s(x)/W_x - M^{eps N}_s(x)/W_N(x, eps N)} ds |``.
    """
    T = cfg.horizon if T is None else T
    N = cfg.N
    rows = []
    for eps in epsilons:
        ell = max(1, min(N, int(round(eps * N))))
        K = two_blocks_kernel(cfg.field, G, ell)

        def one(r):
            eta0 = sample_initial(cfg, r)
            _, integral = simulate_particles(cfg, eta0, T, replica=r, kernel=K)
            return abs(integral) / N ** (1.0 + cfg.gamma)

        vals = np.array(parallel_map(one, range(replicas)))
        rows.append({"epsilon": float(eps), "block": ell, "mean": float(vals.mean()),
                     "se": float(vals.std(ddof=1) / math.sqrt(replicas))})
    return rows
