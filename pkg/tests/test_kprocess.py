import math

import numpy as np
import pytest

from trapsim import kprocess, potential, walk
from trapsim.environment import PppConfig, TrapMeasure, WField, default_w_min, discretize, sample_ppp_environment
from trapsim.kprocess import KParams, TruncationSchedule
from trapsim.lattice import TorusSpec
from trapsim.stats import SampleSummary


def params(w=(2.0, 1.5, 1.0, 0.5), v=potential.V3):
    return KParams(np.array(w), v)


# -- generator ------------------------------------------------------------------


def test_two_state_rate():
    Q = kprocess.build_generator(params(), 2)
    assert Q[0, 1] == pytest.approx(potential.V3 / (2 * 2.0))
    assert Q[1, 0] == pytest.approx(potential.V3 / (2 * 1.5))


def test_single_state_is_zero():
    assert np.array_equal(kprocess.build_generator(params(), 1), np.zeros((1, 1)))


def test_generator_rows_and_reversibility():
    p = params()
    for M in (2, 3, 4):
        Q = kprocess.build_generator(p, M)
        assert np.allclose(Q.sum(axis=1), 0.0, atol=1e-14)
        off = ~np.eye(M, dtype=bool)
        flux = p.weights[:M, None] * Q
        assert np.allclose(flux[off], p.v / M)


def test_params_validation():
    with pytest.raises(ValueError):
        KParams(np.array([1.0, 2.0]), 1.0)
    with pytest.raises(ValueError):
        KParams(np.array([1.0, 0.0]), 1.0)
    with pytest.raises(ValueError):
        KParams(np.array([1.0]), 0.0)
    with pytest.raises(ValueError):
        kprocess.build_generator(params(), 5)


# -- paths -----------------------------------------------------------------------


def test_single_state_path_constant():
    tr = kprocess.simulate_truncated_k(params(), 1, 1, 3.0, seed=0)
    assert tr.segments == [(1, 3.0)]


def test_holding_means_and_stationary_fractions():
    p = params()
    M, T = 4, 20_000.0
    tr = kprocess.simulate_truncated_k(p, M, 1, T, seed=2)
    s, h = tr.sites[:-1], tr.holdings[:-1]
    for i in range(1, M + 1):
        hi = h[s == i]
        expected = p.weights[i - 1] * M / (p.v * (M - 1))
        assert abs(hi.mean() - expected) <= 3 * hi.std(ddof=1) / math.sqrt(hi.size)
    # time fractions proportional to the weights, batch-means SE over replicas
    paths = [kprocess.simulate_truncated_k(p, M, 1, 200.0, seed=3, replica=r) for r in range(400)]
    fracs = np.array([[walk.occupation_time(q, [i]) for i in range(1, M + 1)] for q in paths]) / 200.0
    target = p.weights[:M] / p.weights[:M].sum()
    for i in range(M):
        summ = SampleSummary.from_samples(fracs[:, i], batches=20)
        assert abs(summ.mean - target[i]) <= 3 * summ.se + 1e-3


def test_state_law_matches_expm():
    p = params()
    M, t, n = 3, 1.5, 100_000
    ends = np.array([kprocess.simulate_truncated_k(p, M, 2, t, seed=5, replica=r).sites[-1] for r in range(n)])
    law = kprocess.k_state_law(p, M, 2, t)
    assert law.sum() == pytest.approx(1.0)
    for i in range(M):
        q = np.mean(ends == i + 1)
        assert abs(q - law[i]) <= 3 * math.sqrt(law[i] * (1 - law[i]) / n)


def test_path_validation():
    with pytest.raises(ValueError):
        kprocess.simulate_truncated_k(params(), 3, 4, 1.0, seed=0)
    with pytest.raises(ValueError):
        kprocess.simulate_truncated_k(params(), 0, 1, 1.0, seed=0)


# -- trace convergence ---------------------------------------------------------------


def test_symmetric_pair_equal_rates():
    W = TrapMeasure.from_atoms([((0.1, 0.1, 0.1), 1.0), ((0.6, 0.6, 0.6), 1.0)], 3, background=0.01)
    field = discretize(W, TorusSpec(3, 8))
    rows = kprocess.trace_convergence_experiment(field, 2, "d3")
    assert len(rows) == 2
    assert rows[0]["r_exact"] == pytest.approx(rows[1]["r_exact"], rel=1e-10)
    errs = [abs(r["rel_err"]) for r in rows]
    assert errs == sorted(errs, reverse=True)


def test_trace_convergence_mode_checks():
    field = WField.uniform(TorusSpec(2, 6))
    with pytest.raises(ValueError):
        kprocess.trace_convergence_experiment(field, 2, "d3")
    with pytest.raises(ValueError):
        kprocess.trace_convergence_experiment(field, 2, "d4")


# -- occupation ---------------------------------------------------------------------------


def test_occupation_all_sites_is_zero():
    field = WField.from_values(TorusSpec(2, 4), np.linspace(1.0, 2.0, 16))
    assert kprocess.occupation_negligibility(field, 16, 1.0, replicas=4)["value"] == 0.0


def test_occupation_bounded_by_horizon():
    field = WField.from_values(TorusSpec(3, 6), np.exp(np.random.default_rng(1).normal(size=216)))
    res = kprocess.occupation_negligibility(field, 3, 0.5, replicas=50)
    assert 0.0 <= res["value"] <= 0.5
    assert len(res["per_start"]) == 3


# -- diagonal schedule ---------------------------------------------------------------------


def ppp_fields(Ns, seed=0):
    W = sample_ppp_environment(PppConfig(0.5, default_w_min(0.5), seed), 3)
    return {N: discretize(W, TorusSpec(3, N)) for N in Ns}


def test_diagonal_single_trap_distance_zero():
    fields = ppp_fields([8])
    row = kprocess.diagonal_coupling(fields, TruncationSchedule(((8, 1),)), 1.0, replicas=5)[0]
    assert row["sup_distance"] == 0.0 and row["tv_exact_2"] == 0.0


def test_diagonal_exact_tv_decreases_at_fixed_ell():
    Ns = [8, 16, 32]
    rows = kprocess.diagonal_coupling(ppp_fields(Ns), TruncationSchedule(tuple((N, 4) for N in Ns)), 1.0,
                                      replicas=2)
    tv = [r["tv_exact_2"] for r in rows]
    assert all(b < a for a, b in zip(tv, tv[1:]))


def test_schedule_validation_and_default():
    with pytest.raises(ValueError):
        TruncationSchedule(((8, 3), (16, 2)))
    with pytest.raises(ValueError):
        TruncationSchedule(((8, 0),))
    s = TruncationSchedule.default([8, 16, 100])
    assert s.pairs == ((8, 3), (16, 4), (100, 6))
    assert TruncationSchedule.default([64], cap=lambda N: 2).pairs == ((64, 2),)
