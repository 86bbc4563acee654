import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import brute_min_distance, dist
from pdsub import Aabb, ConfigError, PointCloud, PointRecord, distance, min_pairwise_distance
from pdsub.core import euclidean

coord = st.floats(-1e3, 1e3, allow_nan=False)
vec = st.tuples(coord, coord, coord)


def rec(i, p):
    return PointRecord(i, p)


@pytest.mark.parametrize("a,b,want", [
    ((0, 0, 0), (3, 4, 0), 5.0),
    ((1, 1, 1), (1, 1, 1), 0.0),
    ((0, 0, 0), (1, 1, 1), math.sqrt(3)),
])
def test_distance_examples(a, b, want):
    assert distance(rec(0, a), rec(1, b)) == pytest.approx(want, abs=1e-15)


@given(vec, vec, vec)
def test_triangle_inequality(a, b, c):
    ab = distance(rec(0, a), rec(1, b))
    bc = distance(rec(1, b), rec(2, c))
    ac = distance(rec(0, a), rec(2, c))
    assert ac <= ab + bc + 1e-12 * max(1.0, ab + bc)


@given(vec, vec)
def test_distance_symmetric_and_matches_oracle(a, b):
    d = distance(rec(0, a), rec(1, b))
    assert d == distance(rec(1, b), rec(0, a))
    assert d == pytest.approx(dist(a, b), rel=1e-12, abs=1e-12)
    assert (d == 0) == (tuple(map(float, a)) == tuple(map(float, b)))



def test_distance_tiny_and_huge_offsets():
    o = rec(0, (0.0, 0.0, 0.0))
    assert distance(o, rec(1, (0.0, 0.0, 2.2250738585e-313))) == 2.2250738585e-313
    assert distance(o, rec(1, (3e-170, 4e-170, 0.0))) == pytest.approx(5e-170, rel=1e-15)
    assert distance(o, rec(1, (3e200, 4e200, 0.0))) == pytest.approx(5e200, rel=1e-15)

def test_min_pairwise_examples():
    square = [(0, 0, 0), (1, 0, 0), (0, 1, 0), (1, 1, 0)]
    assert min_pairwise_distance(np.array(square, float)) == 1.0
    assert min_pairwise_distance(np.zeros((2, 3))) == 0.0


def test_min_pairwise_matches_brute_force():
    p = np.random.default_rng(42).random((100, 3))
    assert min_pairwise_distance(PointCloud.from_positions(p)) == brute_min_distance(p)


@given(st.integers(2, 60), st.integers(0, 2**31))
def test_min_pairwise_property(n, seed):
    p = np.random.default_rng(seed).random((n, 3))
    assert min_pairwise_distance(p) == pytest.approx(brute_min_distance(p), rel=1e-15)


def test_min_pairwise_needs_two_points():
    with pytest.raises(ConfigError, match="insufficient"):
        min_pairwise_distance(np.zeros((1, 3)))


def test_record_validation():
    with pytest.raises(ConfigError):
        PointRecord(0, (0, 0, math.nan))
    with pytest.raises(ConfigError):
        PointRecord(0, (0, 0, 0), normal=(1, 1, 0))
    with pytest.raises(ConfigError):
        PointRecord(-1, (0, 0, 0))
    r = PointRecord(3, (1, 2, 3), normal=(0, 0, 1), color=(1, 2, 255))
    assert r.color == (1, 2, 255)


def test_cloud_invariants():
    with pytest.raises(ConfigError, match="increasing"):
        PointCloud([2, 1], np.zeros((2, 3)))
    with pytest.raises(ConfigError):
        PointCloud([0, 1], np.zeros((3, 3)))
    with pytest.raises(ConfigError):
        PointCloud([0], [[np.inf, 0, 0]])
    c = PointCloud.from_positions(np.random.default_rng(0).random((50, 3)) * 5)
    assert c.bounds.contains(c.positions).all()
    assert c.nbytes() == 50 * 32


def test_records_roundtrip():
    recs = [PointRecord(5, (0, 1, 2), (1, 0, 0), (9, 8, 7)), PointRecord(2, (3, 4, 5), (0, 1, 0), (0, 0, 0))]
    c = PointCloud.from_records(recs)
    assert list(c.ids) == [2, 5]
    assert list(c) == sorted(recs, key=lambda r: r.id)


def test_select_and_concatenate():
    c = PointCloud.from_positions(np.arange(30, dtype=float).reshape(10, 3))
    s = c.select_ids([7, 1, 3])
    assert list(s.ids) == [1, 3, 7]
    both = PointCloud.concatenate([c, s])
    assert len(both) == 13 and list(both.ids) == list(range(13))


def test_aabb():
    box = Aabb((0, 0, 0), (1, 2, 3))
    assert box.volume() == 6.0
    assert box.diagonal() == pytest.approx(math.sqrt(14))
    with pytest.raises(ConfigError):
        Aabb((1, 0, 0), (0, 0, 0))


def test_euclidean_broadcast_matches_scalar():
    p = np.random.default_rng(1).random((20, 3))
    full = euclidean(p[:, None, :], p[None, :, :])
    for i in range(20):
        for j in range(20):
            assert full[i, j] == euclidean(p[i], p[j])
