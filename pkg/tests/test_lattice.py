import math

import pytest
from hypothesis import given, settings, strategies as st

from wittenlab.errors import (EmptySupportError, InvalidGeometryError,
                              UnknownSiteError)
from wittenlab.lattice import (SiteSubset, WeightFunction, build_lattice,
                               exponential_weight, graph_distance,
                               multi_index_weight, set_distance)


def test_chain_combinatorics():
    lat = build_lattice(1, [4])
    assert lat.n_sites == 4
    assert len(lat.adjacency) == 3


def test_square_combinatorics():
    lat = build_lattice(2, [2, 2])
    assert lat.n_sites == 4
    assert len(lat.adjacency) == 4


def test_degenerate_extent_rejected():
    with pytest.raises(InvalidGeometryError):
        build_lattice(1, [0])
    with pytest.raises(InvalidGeometryError):
        build_lattice(0, [])
    with pytest.raises(InvalidGeometryError):
        build_lattice(2, [3])


def test_chain_distance():
    lat = build_lattice(1, [4])
    assert graph_distance(lat, 0, 3) == 3
    assert graph_distance(lat, 2, 2) == 0


def test_square_distance():
    lat = build_lattice(2, [2, 2])
    assert graph_distance(lat, (0, 0), (1, 1)) == 2


def test_unknown_site():
    lat = build_lattice(1, [4])
    with pytest.raises(UnknownSiteError):
        graph_distance(lat, 0, 7)
    with pytest.raises(UnknownSiteError):
        lat.ordinal((9,))


def test_set_distance():
    lat = build_lattice(1, [6])
    S = SiteSubset(lat, ((0,), (1,)))
    assert set_distance(lat, 5, S) == 4
    assert set_distance(lat, 0, S) == 0
    for j in S.members:
        assert set_distance(lat, 3, S) <= graph_distance(lat, 3, j)


def test_empty_support():
    lat = build_lattice(1, [3])
    with pytest.raises(EmptySupportError):
        set_distance(lat, 0, SiteSubset(lat, ()))


def test_subset_membership_checked():
    lat = build_lattice(1, [3])
    with pytest.raises(UnknownSiteError):
        SiteSubset(lat, ((5,),))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(min_value=1, max_value=4), min_size=1, max_size=3))
def test_metric_axioms_exhaustive(shape):
    lat = build_lattice(len(shape), shape)
    if lat.n_sites > 16:
        return
    sites = lat.sites
    for a in sites:
        assert graph_distance(lat, a, a) == 0
        for b in sites:
            dab = graph_distance(lat, a, b)
            assert dab == graph_distance(lat, b, a)
            assert (dab == 0) == (a == b)
            for c in sites:
                assert graph_distance(lat, a, c) <= dab + graph_distance(lat, b, c)


def test_adjacency_pairs_at_distance_one():
    lat = build_lattice(2, [3, 2])
    for a, b in lat.adjacency:
        assert graph_distance(lat, lat.sites[a], lat.sites[b]) == 1


@settings(max_examples=25, deadline=None)
@given(st.floats(min_value=0.05, max_value=1.5),
       st.integers(min_value=2, max_value=8))
def test_exponential_weight_ratio_bound(kappa, n):
    lat = build_lattice(1, [n])
    S = SiteSubset(lat, ((0,),))
    wf = exponential_weight(lat, kappa, S)
    assert wf.lipschitz_lambda == kappa
    bound = math.exp(kappa) * (1 + 1e-12)
    for a, b in lat.adjacency:
        r = wf.values[lat.sites[a]] / wf.values[lat.sites[b]]
        assert 1 / bound <= r <= bound


def test_exponential_weight_values():
    lat = build_lattice(1, [5])
    S = SiteSubset(lat, ((0,),))
    wf = exponential_weight(lat, 0.3, S)
    assert wf.values[(2,)] == pytest.approx(math.exp(0.6))
    assert wf.values[(0,)] == 1.0


def test_exponential_weight_needs_positive_kappa():
    lat = build_lattice(1, [3])
    with pytest.raises(InvalidGeometryError):
        exponential_weight(lat, 0.0, SiteSubset(lat, ((0,),)))


def test_weight_function_validates_ratio():
    lat = build_lattice(1, [2])
    with pytest.raises(InvalidGeometryError):
        WeightFunction(lat, {(0,): 1.0, (1,): 100.0}, 0.5)
    with pytest.raises(InvalidGeometryError):
        WeightFunction(lat, {(0,): 1.0, (1,): -1.0}, 0.5)


def test_multi_index_weight_on_demand():
    lat = build_lattice(1, [6])
    S = SiteSubset(lat, ((0,),))
    w = multi_index_weight(lat, 0.3, ((4,), (2,)), S)
    assert w == pytest.approx(math.exp(0.3 * 2))


def test_neighbor_lists_match_adjacency():
    lat = build_lattice(2, [2, 3])
    nbrs = lat.neighbor_lists()
    total = sum(len(v) for v in nbrs)
    assert total == 2 * len(lat.adjacency)
