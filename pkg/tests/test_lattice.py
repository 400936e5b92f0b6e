import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trapsim.lattice import (LatticeError, TorusSpec, cube_index, cube_indices, distances_from,
                             euclidean_distance, graph_distance, neighbors)


def test_neighbors_cycle():
    assert neighbors(TorusSpec(1, 4), 0) == [1, 3]


def test_neighbors_wraparound_2d():
    assert neighbors(TorusSpec(2, 3), (0, 0)) == [(1, 0), (2, 0), (0, 1), (0, 2)]


def test_neighbors_3d():
    spec = TorusSpec(3, 5)
    nb = neighbors(spec, (4, 0, 2))
    assert sorted(nb) == sorted([(0, 0, 2), (3, 0, 2), (4, 1, 2), (4, 4, 2), (4, 0, 3), (4, 0, 1)])


def test_invalid_coordinate_rejected():
    with pytest.raises(LatticeError):
        neighbors(TorusSpec(2, 3), (3, 0))
    with pytest.raises(LatticeError):
        TorusSpec(2, 3).flat((0,))


@pytest.mark.parametrize("d", [0, 4])
def test_dimension_out_of_range(d):
    with pytest.raises(LatticeError, match="dimension out of range"):
        TorusSpec(d, 4)


def test_side_too_small():
    with pytest.raises(LatticeError):
        TorusSpec(1, 1)


def test_graph_distance_examples():
    assert graph_distance(TorusSpec(1, 8), 1, 7) == 2
    assert graph_distance(TorusSpec(2, 6), (1, 2), (1, 2)) == 0
    assert graph_distance(TorusSpec(2, 6), (0, 0), (3, 3)) == 6


def test_euclidean_distance_examples():
    assert euclidean_distance(TorusSpec(2, 10), (0, 0), (5, 5)) == pytest.approx(10 * math.sqrt(0.5))
    assert euclidean_distance(TorusSpec(2, 10), (3, 4), (3, 4)) == 0.0
    assert euclidean_distance(TorusSpec(1, 100), 10, 90) == pytest.approx(20.0)


def test_cube_index_examples():
    assert cube_index(0.3, 4) == 1
    assert cube_index((0.99, 0.0), 2) == (1, 0)
    assert cube_index(0.0, 10) == 0


@pytest.mark.parametrize("p", [1.0, -0.1, (0.5, 1.0)])
def test_cube_index_outside(p):
    with pytest.raises(LatticeError):
        cube_index(p, 4)


def test_neighbor_table_matches_neighbors():
    spec = TorusSpec(3, 4)
    table = spec.neighbor_table()
    for x in (0, 17, 63):
        assert [spec.coords(int(y)) for y in table[x]] == neighbors(spec, spec.coords(x))


def test_site_count_and_degree():
    spec = TorusSpec(3, 5)
    assert spec.n_sites == 125
    assert spec.neighbor_table().shape == (125, 6)


sites = st.integers(0, 10**6)


@settings(max_examples=60, deadline=None)
@given(d=st.integers(1, 3), N=st.integers(3, 9), a=sites, b=sites, c=sites)
def test_metric_properties(d, N, a, b, c):
    spec = TorusSpec(d, N)
    x, y, z = (v % spec.n_sites for v in (a, b, c))
    dxy = graph_distance(spec, x, y)
    assert dxy == graph_distance(spec, y, x)
    assert dxy <= graph_distance(spec, x, z) + graph_distance(spec, z, y)
    assert dxy <= d * N // 2
    assert (dxy == 0) == (x == y)
    assert euclidean_distance(spec, x, y) <= dxy + 1e-12


@settings(max_examples=40, deadline=None)
@given(d=st.integers(1, 3), N=st.integers(3, 9), a=sites)
def test_neighbor_symmetry(d, N, a):
    spec = TorusSpec(d, N)
    table = spec.neighbor_table()
    x = a % spec.n_sites
    for y in table[x]:
        assert x in table[y]
        assert graph_distance(spec, x, int(y)) == 1


def test_cube_partition_volume():
    spec = TorusSpec(2, 8)
    rng = np.random.default_rng(0)
    pts = rng.random((200_000, 2))
    counts = np.bincount(cube_indices(pts, spec), minlength=spec.n_sites)
    # every cube receives about volume N^-d of the points
    assert counts.min() > 0
    assert np.allclose(counts / pts.shape[0], 1 / 64, atol=6 * math.sqrt(1 / 64 / 200_000))


def test_distances_from_agrees():
    spec = TorusSpec(2, 7)
    dist = distances_from(spec, (1, 5))
    assert all(dist[y] == graph_distance(spec, (1, 5), y) for y in range(spec.n_sites))
    eu = distances_from(spec, (1, 5), metric="euclidean")
    assert eu[spec.flat((4, 1))] == pytest.approx(euclidean_distance(spec, (1, 5), (4, 1)))
