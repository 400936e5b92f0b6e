"""Statistical helpers shared by the experiments."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as _sps


@dataclass(frozen=True)
class SampleSummary:
    n: int
    mean: float
    variance: float
    se: float
    batches: int

    @classmethod
    def from_samples(cls, x, batches: int = 20) -> "SampleSummary":
        """Mean, variance and a batch-means standard error.

        Samples are split into ``batches`` contiguous batches; the standard
        error is the spread of the batch means. At least 10 batches are used.
        """
        x = np.asarray(x, dtype=float).ravel()
        if batches < 10:
            raise ValueError("batch-mean SE needs at least 10 batches")
        if x.size < batches:
            raise ValueError(f"need at least {batches} samples, got {x.size}")
        usable = (x.size // batches) * batches
        bm = x[:usable].reshape(batches, -1).mean(axis=1)
        se = float(bm.std(ddof=1) / math.sqrt(batches))
        var = float(x.var(ddof=1)) if x.size > 1 else 0.0
        return cls(int(x.size), float(x.mean()), var, se, batches)

    def merge(self, other: "SampleSummary") -> "SampleSummary":
        """Combine two summaries of independent runs (associative)."""
        n = self.n + other.n
        mean = (self.n * self.mean + other.n * other.mean) / n
        ss = (self.n - 1) * self.variance + (other.n - 1) * other.variance
        ss += self.n * (self.mean - mean) ** 2 + other.n * (other.mean - mean) ** 2
        var = ss / (n - 1)
        se = math.sqrt((self.se**2 * self.n**2 + other.se**2 * other.n**2)) / n
        return SampleSummary(n, mean, var, se, self.batches + other.batches)


def mean_se(x) -> tuple[float, float]:
    """Sample mean and its iid standard error."""
    x = np.asarray(x, dtype=float).ravel()
    if x.size < 2:
        return float(x.mean()) if x.size else float("nan"), float("nan")
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def proportion_se(k: int, n: int) -> tuple[float, float]:
    p = k / n
    return p, math.sqrt(max(p * (1 - p), 0.0) / n)


def ks_two_sample(a, b) -> tuple[float, float]:
    """Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.

    >>> ks_two_sample(np.arange(30.0), np.arange(30.0))[0]
    0.0
    """
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size < 25 or b.size < 25:
        raise ValueError("ks_two_sample needs at least 25 points per sample")
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    stat = float(np.max(np.abs(fa - fb)))
    en = math.sqrt(a.size * b.size / (a.size + b.size))
    p = float(_sps.kstwobign.sf(en * stat))
    return stat, min(max(p, 0.0), 1.0)


def ks_critical(n: int, m: int, level: float = 0.01) -> float:
    """Asymptotic two-sample KS critical value at the given level."""
    c = _sps.kstwobign.isf(level)
    return float(c * math.sqrt((n + m) / (n * m)))


def wasserstein1_torus(mu, nu) -> float:
    """W1 distance between two finite measures on the unit circle ``[0, 1)``.

    ``mu`` and ``nu`` are ``(positions, weights)`` pairs (weights may be
    omitted for unit point masses). With ``D = F_mu - F_nu`` the distance is
    ``min_c  int_0^1 |D(t) - c| dt``, attained at a weighted median of ``D``.

    >>> round(wasserstein1_torus(([0.0], [1.0]), ([0.9], [1.0])), 12)
    0.1
    """
    xp, wp = _as_measure(mu)
    xq, wq = _as_measure(nu)
    if not math.isclose(wp.sum(), wq.sum(), rel_tol=1e-9, abs_tol=1e-12):
        raise ValueError(f"mass mismatch: {wp.sum()} vs {wq.sum()}")
    pts = np.concatenate([xp, xq])
    w = np.concatenate([wp, -wq])
    order = np.argsort(pts, kind="mergesort")
    pts, w = pts[order], w[order]
    cum = np.cumsum(w)
    # D is constant on [pts[k], pts[k+1]) with value cum[k]; on the wrap piece
    # [pts[-1], 1) + [0, pts[0]) it equals cum[-1] = 0.
    lengths = np.diff(np.concatenate([pts, [pts[0] + 1.0]]))
    vals = cum.copy()
    vals[-1] = 0.0
    c = _weighted_median(vals, lengths)
    return float(np.sum(lengths * np.abs(vals - c)))


def _as_measure(m):
    if isinstance(m, tuple) and len(m) == 2:
        x, w = m
        x = np.asarray(x, dtype=float).ravel()
        w = np.asarray(w, dtype=float).ravel()
    else:
        x = np.asarray(m, dtype=float).ravel()
        w = np.ones_like(x)
    if x.size != w.size:
        raise ValueError("positions and weights differ in length")
    if x.size and (x.min() < 0.0 or x.max() >= 1.0):
        raise ValueError("support must lie in [0, 1)")
    return x, w


def _weighted_median(vals, weights):
    order = np.argsort(vals, kind="mergesort")
    v, w = vals[order], weights[order]
    cw = np.cumsum(w)
    k = int(np.searchsorted(cw, 0.5 * cw[-1]))
    return float(v[min(k, v.size - 1)])


def trend_test(values, threshold: float = 0.8) -> tuple[float, bool]:
    """Fraction of consecutive strict decreases and the pass verdict.

    >>> trend_test([3, 2, 2.5, 1])[0]
    0.6666666666666666
    """
    v = np.asarray(values, dtype=float).ravel()
    if v.size < 3:
        raise ValueError("trend_test needs at least 3 values")
    frac = float(np.mean(v[1:] < v[:-1]))
    return frac, frac >= threshold


def total_variation(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return 0.5 * float(np.abs(p - q).sum())


def empirical_law(states, n_states: int, offset: int = 0) -> np.ndarray:
    """Normalised histogram of integer ``states`` over ``offset .. offset+n_states-1``."""
    counts = np.bincount(np.asarray(states, dtype=np.int64) - offset, minlength=n_states)
    return counts[:n_states] / max(len(states), 1)
