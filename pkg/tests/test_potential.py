import math

import numpy as np
import pytest

from trapsim import potential
from trapsim.environment import WField
from trapsim.lattice import TorusSpec, distances_from
from trapsim.rng import stream
from trapsim.walk import estimate_hitting_probability


def random_field(spec, seed, spread=1.0):
    rng = stream(seed, 0, "test-field")
    return WField.from_values(spec, np.exp(rng.normal(0.0, spread, spec.n_sites)))


def random_sets(spec, seed, nA=2, nF=4):
    rng = stream(seed, 0, "test-sets")
    perm = rng.permutation(spec.n_sites)
    A = perm[:nA]
    y = int(perm[nA])
    F = np.sort(perm[:nF])
    return A, y, F


# -- chain basics ------------------------------------------------------------------


def test_chain_stationary_law_and_detailed_balance():
    spec = TorusSpec(2, 5)
    chain = potential.ChainSpec.from_field(random_field(spec, 1))
    assert chain.nu.sum() == pytest.approx(1.0, abs=1e-12)
    for x, y in [(0, 1), (7, 12), (24, 4)]:
        if y in spec.neighbor_table()[x]:
            a = chain.nu[x] * chain.edge_rate(x, y)
            assert a == pytest.approx(chain.nu[y] * chain.edge_rate(y, x), rel=1e-12)
            assert a == pytest.approx(1.0 / (spec.degree * chain.mass), rel=1e-12)


# -- harmonic ---------------------------------------------------------------------------


def test_harmonic_cycle_symmetry():
    sol = potential.harmonic(TorusSpec(1, 4), [0], [2])
    assert sol.f.tolist() == pytest.approx([1.0, 0.5, 0.0, 0.5])


def test_harmonic_full_boundary_is_indicator():
    spec = TorusSpec(1, 5)
    sol = potential.harmonic(spec, [0, 3], [1, 2, 4])
    assert sol.f.tolist() == [1.0, 0.0, 0.0, 1.0, 0.0]


def test_harmonic_rejects_overlap():
    with pytest.raises(ValueError):
        potential.harmonic(TorusSpec(1, 6), [0, 1], [1])


def test_harmonic_maximum_principle():
    spec = TorusSpec(3, 6)
    for seed in range(5):
        A, y, F = random_sets(spec, seed, nA=3, nF=6)
        sol = potential.harmonic(spec, A, F[~np.isin(F, A)])
        assert sol.f.min() >= -1e-12 and sol.f.max() <= 1 + 1e-12
        assert sol.residual <= 1e-10 * spec.degree


def test_harmonic_matches_skeleton_monte_carlo():
    spec = TorusSpec(2, 8)
    A, B = [(0, 0), (5, 1)], [(3, 4), (7, 6)]
    f = potential.harmonic(spec, A, B).f
    for k, probe in enumerate([(1, 1), (4, 4), (2, 6), (6, 3), (3, 0)]):
        p, se = estimate_hitting_probability(spec, probe, A, B, replicas=4000, seed=k)
        assert abs(p - f[spec.flat(probe)]) <= 3 * se + 1e-3


# -- capacities ------------------------------------------------------------------------


def test_capacity_cycle_series_parallel():
    assert potential.capacity_skeleton(TorusSpec(1, 4), [0], [2]) == pytest.approx(0.5)


def test_capacity_symmetry_and_monotonicity():
    spec = TorusSpec(2, 8)
    for seed in range(6):
        rng = stream(seed, 0, "cap-mono")
        perm = rng.permutation(spec.n_sites)
        A, A2, B = perm[:2], perm[:4], perm[10:13]
        c = potential.capacity_skeleton(spec, A, B)
        assert c == pytest.approx(potential.capacity_skeleton(spec, B, A), rel=1e-10)
        assert c <= potential.capacity_skeleton(spec, A2, B) + 1e-12


def test_capacity_chain_scaling():
    spec = TorusSpec(2, 4)
    unit = potential.ChainSpec.from_field(WField.uniform(spec, 1.0 / spec.n_sites))
    assert potential.capacity_chain(unit, [0], [5]) == pytest.approx(potential.capacity_skeleton(spec, [0], [5]))
    f = random_field(spec, 2)
    c1 = potential.ChainSpec.from_field(f)
    c2 = potential.ChainSpec.from_field(WField.from_values(spec, 2 * f.values))
    assert potential.capacity_chain(c2, [0], [5]) == pytest.approx(potential.capacity_chain(c1, [0], [5]) / 2)
    assert potential.capacity_skeleton(c2, [0], [5]) == potential.capacity_skeleton(c1, [0], [5])


def test_capacity_equals_dirichlet_form_of_minimizer():
    spec = TorusSpec(1, 6)
    chain = potential.ChainSpec.from_field(random_field(spec, 3))
    f = potential.harmonic(spec, [0], [3]).f
    assert potential.dirichlet_form(chain, f) == pytest.approx(potential.capacity_chain(chain, [0], [3]),
                                                               rel=1e-10)


# -- trace rates -------------------------------------------------------------------------


def test_trace_rates_cycle_gamblers_ruin():
    c = 2.5
    chain = potential.ChainSpec.uniform(TorusSpec(1, 4), c)
    R = potential.trace_rates_exact(chain, [0, 2])
    assert R[0, 1] == pytest.approx(0.5 / c)
    assert R[0, 0] == 0.0


def test_trace_rates_row_sums_and_reversibility():
    spec = TorusSpec(2, 8)
    for seed in range(5):
        chain = potential.ChainSpec.from_field(random_field(spec, 10 + seed))
        F = random_sets(spec, seed, nF=3)[2]
        R = potential.trace_rates_exact(chain, F)
        assert np.all(R.sum(axis=1) <= chain.lam[F] + 1e-12)
        flux = chain.nu[F][:, None] * R
        assert np.allclose(flux, flux.T, rtol=1e-9, atol=0)


def test_trace_rates_keep_array_order():
    spec = TorusSpec(2, 6)
    chain = potential.ChainSpec.from_field(random_field(spec, 4))
    F = np.array([20, 3, 11])
    R = potential.trace_rates_exact(chain, F)
    Rs = potential.trace_rates_exact(chain, [3, 11, 20])
    perm = [2, 0, 1]
    assert np.allclose(R, Rs[np.ix_(perm, perm)])


# -- identities ----------------------------------------------------------------------------


def test_expected_hitting_identity_random_fields():
    spec = TorusSpec(2, 8)
    for seed in range(20):
        chain = potential.ChainSpec.from_field(random_field(spec, 100 + seed, 1.5))
        A, y, F = random_sets(spec, seed, nA=2, nF=4)
        F = np.union1d(F, [y])
        lhs, rhs = potential.expected_hitting_identity(chain, F, y, A)
        assert abs(lhs - rhs) <= 1e-8 * rhs
        # P_z[H(y) < H(A)] <= 1 and vanishes on A
        bound = chain.nu[F[~np.isin(F, A)]].sum() / potential.capacity_chain(chain, [y], A)
        assert lhs <= bound * (1 + 1e-12)


def test_expected_hitting_identity_positive_for_complement():
    spec = TorusSpec(2, 4)
    chain = potential.ChainSpec.from_field(random_field(spec, 5))
    F = np.array([0, 1, 5])
    lhs, rhs = potential.expected_hitting_identity(chain, F, 0, [1, 5])
    assert lhs > 0 and rhs > 0 and math.isfinite(lhs)


def test_escape_identity_cycle():
    chain = potential.ChainSpec.uniform(TorusSpec(1, 4))
    lhs, rhs = potential.escape_identity(chain, 0, [2])
    assert lhs == pytest.approx(0.5) and rhs == pytest.approx(0.5)


def test_escape_identity_random_3d():
    spec = TorusSpec(3, 8)
    for seed in range(5):
        chain = potential.ChainSpec.from_field(random_field(spec, 200 + seed, 1.5))
        A, y, _ = random_sets(spec, seed, nA=3)
        lhs, rhs = potential.escape_identity(chain, y, A)
        assert abs(lhs - rhs) <= 1e-8 * rhs


def test_escape_identity_all_other_sites():
    spec = TorusSpec(2, 3)
    chain = potential.ChainSpec.from_field(random_field(spec, 6))
    lhs, _ = potential.escape_identity(chain, 4, [x for x in range(9) if x != 4])
    assert lhs == 1.0


# -- hitting times ----------------------------------------------------------------------------


def test_mean_hitting_same_site():
    assert potential.mean_hitting_torus(TorusSpec(2, 4), 3, 3) == 0.0


def test_mean_hitting_cycle_formula():
    # skeleton walk on the N-cycle: E_0[H(k)] = k (N - k)
    spec = TorusSpec(1, 10)
    assert potential.mean_hitting_torus(spec, 0, 3) == pytest.approx(21.0)


def test_mean_hitting_chain_clock_uniform():
    spec = TorusSpec(2, 6)
    chain = potential.ChainSpec.uniform(spec, 0.25)
    skel = potential.mean_hitting_torus(spec, 0, (3, 3))
    assert potential.mean_hitting_torus(chain, 0, (3, 3), clock="chain") == pytest.approx(0.25 * skel)


def test_mean_hitting_order_d3():
    vals = []
    for N in (8, 16, 32):
        spec = TorusSpec(3, N)
        vals.append(potential.mean_hitting_torus(spec, 0, (N // 2,) * 3) / N**3)
    assert max(vals) / min(vals) < 1.2


def test_mean_hitting_order_d2():
    vals = []
    for N in (16, 32, 64):
        spec = TorusSpec(2, N)
        k = N // 2
        vals.append(potential.mean_hitting_torus(spec, 0, (k, 0)) / (N**2 * math.log(k)))
    assert 0.2 <= min(vals) and max(vals) <= 2.0


# -- boxes and v_d -------------------------------------------------------------------------------


def test_green_box_smallest():
    # from the centre of a 3x3 box the walk returns with probability 1/3
    assert potential.green_box_2d(1) == pytest.approx(1.5)


@pytest.mark.parametrize("d,L", [(2, 6), (3, 5)])
def test_box_green_spectral_matches_solve(d, L):
    assert potential.box_green_center(d, L, "spectral") == pytest.approx(potential.box_green_center(d, L), rel=1e-11)


def test_box_escape_decreases_in_size():
    esc = [1.0 / potential.green_box_2d(l) for l in (2, 4, 8, 16)]
    assert all(b < a for a, b in zip(esc, esc[1:]))
    v = [potential.escape_probability_vd(3, L, extrapolate=False) for L in (8, 12, 16)]
    assert all(b < a for a, b in zip(v, v[1:])) and v[-1] > potential.V3


def test_escape_probability_extrapolated_small():
    assert potential.escape_probability_vd(3, 16) == pytest.approx(potential.V3, abs=2e-3)


def test_escape_probability_rejects_small_box():
    with pytest.raises(ValueError):
        potential.escape_probability_vd(3, 4)
    with pytest.raises(ValueError):
        potential.escape_probability_vd(2, 16)


def test_richardson_exact_on_polynomials():
    Ls = [4, 8, 16]
    vals = [2.0 + 3.0 / L - 5.0 / L**2 for L in Ls]
    assert potential.richardson_limit(Ls, vals) == pytest.approx(2.0)


# -- hitting uniformity -------------------------------------------------------------------------


def test_hitting_split_symmetric_pair_exact():
    spec = TorusSpec(3, 12)
    H = potential.hitting_split(spec, [(1, 0, 0), (7, 0, 0)], starts=[(4, 0, 0), (4, 6, 2), (10, 3, 3)])
    assert np.abs(H - 0.5).max() <= 1e-10
    assert np.allclose(H.sum(axis=1), 1.0)


def test_hitting_split_far_starts_near_uniform():
    spec = TorusSpec(3, 16)
    pos = [(0.1, 0.15, 0.1), (0.6, 0.55, 0.2), (0.55, 0.1, 0.6), (0.15, 0.6, 0.65)]
    traps = [tuple(int(c * 16) for c in p) for p in pos]
    H = potential.hitting_split(spec, traps)
    far = np.ones(spec.n_sites, dtype=bool)
    for t in traps:
        far &= distances_from(spec, t, "euclidean") >= 4
    assert np.abs(H[far] - 0.25).max() < 0.05
