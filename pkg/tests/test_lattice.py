import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from idla_lab.lattice import (
    Difference, Disk, EmptyRegion, Polygon, SiteSet, Union, boundary, eps_neighborhoods, hausdorff,
    neighbors, outer_boundary, region_from_dict, region_from_json, sites_in,
)


def brute_disk_count(r2):
    k = int(math.isqrt(r2)) + 1
    return sum(1 for x in range(-k, k + 1) for y in range(-k, k + 1) if x * x + y * y <= r2)


def block(n, x0=0, y0=0):
    return SiteSet.from_sites([(x0 + i, y0 + j) for i in range(n) for j in range(n)])


def test_neighbors_order():
    assert neighbors((0, 0)) == [(1, 0), (-1, 0), (0, 1), (0, -1)]
    assert neighbors((3, -2)) == [(4, -2), (2, -2), (3, -1), (3, -3)]


def test_neighbors_twice():
    out = [w for v in neighbors((0, 0)) for w in neighbors(v)]
    assert out.count((0, 0)) == 4
    rest = set(out) - {(0, 0)}
    assert len(rest) == 8
    assert all(abs(x) + abs(y) == 2 for x, y in rest)


def test_boundary_small_cases():
    one = SiteSet.from_sites([(0, 0)])
    assert set(boundary(one)) == {(0, 0)}
    b3 = boundary(block(3))
    assert b3.count == 8 and (1, 1) not in b3


def test_boundary_5x5_matches_scan():
    A = block(5)
    sites = set(A)
    scan = {z for z in sites if any(w not in sites for w in neighbors(z))}
    assert set(boundary(A)) == scan
    assert len(scan) == 16


def test_outer_boundary_of_point():
    assert set(outer_boundary(SiteSet.from_sites([(0, 0)]))) == set(neighbors((0, 0)))


def test_sites_in_unit_disk():
    assert set(sites_in(Disk((0, 0), 1.0), 1)) == {(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)}
    assert sites_in(Disk((0, 0), 1.0), 10).count == 317 == brute_disk_count(100)
    assert sites_in(EmptyRegion(), 5).count == 0


def test_sites_in_unbounded_region():
    class HalfPlane(EmptyRegion):
        def bbox(self):
            return (-math.inf, math.inf, 0.0, 1.0)

    with pytest.raises(ValueError):
        sites_in(HalfPlane(), 4)


@pytest.mark.parametrize("r,m", [(1.0, 10), (1.0, 40), (0.5, 40), (2.0, 16)])
def test_disk_area_convergence(r, m):
    cnt = sites_in(Disk((0, 0), r), m).count
    assert cnt == brute_disk_count(int(round((r * m) ** 2)))
    assert abs(cnt / m**2 - math.pi * r * r) / (math.pi * r * r) <= 4 / (r * m)


def test_eps_neighborhoods_disk():
    outer, inner = eps_neighborhoods(Disk((0, 0), 1.0), 0.25)
    pts = np.array([[1.24, 0.0], [1.26, 0.0], [0.74, 0.0], [0.76, 0.0]])
    assert list(outer.contains(pts)) == [True, False, True, True]
    assert list(inner.contains(pts)) == [False, False, True, False]


def test_eps_zero_and_negative():
    D = Disk((0, 0), 1.0)
    outer, inner = eps_neighborhoods(D, 0.0)
    assert outer.contains(np.array([[1.0, 0.0]]))[0]
    assert not inner.contains(np.array([[1.0, 0.0]]))[0]
    with pytest.raises(ValueError):
        eps_neighborhoods(D, -0.1)


def test_eps_square_membership():
    sq = Polygon([(0, 0), (1, 0), (1, 1), (0, 1)])
    _, inner = eps_neighborhoods(sq, 0.1)
    assert not inner.contains(np.array([[0.95, 0.5]]))[0]
    assert inner.contains(np.array([[0.5, 0.5]]))[0]


@pytest.mark.parametrize("eps", [0.05, 0.2, 0.5])
def test_neighborhood_sandwich(eps):
    R = Union([Disk((0, 0), 1.0), Polygon([(0.5, -0.5), (2.0, -0.5), (2.0, 0.5), (0.5, 0.5)])])
    outer, inner = eps_neighborhoods(R, eps)
    a, b, c = sites_in(inner, 20), sites_in(R, 20), sites_in(outer, 20)
    assert a.issubset(b) and b.issubset(c)


def test_hausdorff_examples():
    A = SiteSet.from_sites([(0, 0)])
    assert hausdorff(A, A) == 0
    assert hausdorff(A, SiteSet.from_sites([(3, 4)]), 1) == 5
    assert hausdorff(block(10), block(10, 2, 0), 1) == 2
    with pytest.raises(ValueError):
        hausdorff(SiteSet.empty(), A)


def brute_hausdorff(P, Q):
    d = lambda a, b: math.dist(a, b)
    return max(max(min(d(a, b) for b in Q) for a in P), max(min(d(a, b) for a in P) for b in Q))


site_lists = st.lists(st.tuples(st.integers(-6, 6), st.integers(-6, 6)), min_size=1, max_size=8, unique=True)


@settings(max_examples=60, deadline=None)
@given(site_lists, site_lists, site_lists)
def test_hausdorff_metric(P, Q, R):
    dpq = hausdorff(np.array(P), np.array(Q), 1)
    assert dpq == pytest.approx(brute_hausdorff(P, Q))
    assert dpq == pytest.approx(hausdorff(np.array(Q), np.array(P), 1))
    assert (dpq == 0) == (set(P) == set(Q))
    assert dpq <= hausdorff(np.array(P), np.array(R), 1) + hausdorff(np.array(R), np.array(Q), 1) + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(-5, 5), st.integers(-5, 5)), min_size=1, max_size=40, unique=True))
def test_boundary_properties(P):
    A = SiteSet.from_sites(P)
    B = boundary(A)
    assert B.issubset(A)
    core = A.difference(B)
    # interior-of-interior sites never reappear on the recomputed boundary
    deep = {z for z in core if all(w in core for w in neighbors(z))}
    if core.count:
        assert not (set(boundary(core)) & deep)


def test_siteset_count_invariant():
    A = SiteSet.from_sites([(0, 0), (2, 3)])
    A.add((1, 1))
    A.discard((0, 0))
    assert A.count == int(A.grid.sum()) == 2
    assert set(A) == {(2, 3), (1, 1)}
    with pytest.raises(IndexError):
        A.add((-4, 1))


def test_region_json_roundtrip():
    R = Difference(Disk((0, 0), 2.0), Polygon([(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)]))
    again = region_from_json(R.to_json())
    pts = np.random.default_rng(3).uniform(-2.5, 2.5, size=(200, 2))
    assert np.array_equal(R.contains(pts), again.contains(pts))
    assert isinstance(region_from_dict({"disk": {"center": [0, 0], "radius": 1}}), Disk)


def test_polygon_distance_exact():
    sq = Polygon([(0, 0), (1, 0), (1, 1), (0, 1)])
    assert sq.sdf(np.array([[2.0, 0.5]]))[0] == pytest.approx(1.0)
    assert sq.sdf(np.array([[2.0, 2.0]]))[0] == pytest.approx(math.sqrt(2))
    assert sq.sdf(np.array([[0.5, 0.5]]))[0] == pytest.approx(-0.5)
