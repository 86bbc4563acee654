import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import knn_cost, linear_knn
from pdsub.cost import (CostConfig, CostKind, CostValue, YukselParams, cache_cost, color_weight, cost_k1,
                        cost_knn, cost_knn_color, cost_knn_normal, inverse_square, normal_weight,
                        sum_first_k, yuksel_cost, yuksel_radius, yuksel_rmin, yuksel_weight)
from pdsub.errors import ConfigError
from pdsub.neighborhood import KdTree, Neighbor, NeighborCache, invalidate


def cache(dists, k=6, owner=0, ids=None):
    ids = list(range(1, len(dists) + 1)) if ids is None else ids
    return NeighborCache(owner, k, np.array(ids, dtype=np.uint64), np.array(dists, float))


def test_k1_examples():
    assert cost_k1(cache([2.0, 3.0])) == 0.25
    assert cost_k1(cache([])) == 0.0
    assert cost_k1(cache([0.0]), 1e-6) == pytest.approx(1e12, rel=1e-12)


def test_knn_examples():
    assert cost_knn(cache([1.0, 2.0]), 2) == 1.25
    c = cache(np.random.default_rng(0).random(14) + 0.1)
    assert cost_knn(c, 1) == cost_k1(c)


def test_knn_skips_invalid_entries():
    c = invalidate(cache([1.0, 2.0, 4.0]), 1)
    assert cost_knn(c, 2) == 0.25 + 1 / 16


def test_normal_examples():
    c = cache([1.0, 2.0, 3.0])
    up = {i: (0, 0, 1) for i in range(4)}
    assert cost_knn_normal(c, up, 3) == cost_knn(c, 3)
    down = {**up, **{i: (0, 0, -1) for i in (1, 2, 3)}}
    assert cost_knn_normal(c, down, 3) == 0.0
    tilted = {0: (0, 0, 1), 1: (0, math.sin(math.pi / 3), math.cos(math.pi / 3))}
    assert cost_knn_normal(cache([1.0]), tilted, 1) == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(ConfigError):
        cost_knn_normal(c, {0: (0, 0, 1)}, 3)


def test_color_examples():
    c = cache([1.0, 2.0])
    same = {i: (10, 20, 30) for i in range(3)}
    assert cost_knn_color(c, same, 2) == cost_knn(c, 2)
    far = {0: (0, 0, 0), 1: (255, 0, 0), 2: (0, 255, 0)}
    assert cost_knn_color(c, far, 2, sigma_c=1e-9) == 0.0
    unit = {0: (0, 0, 0), 1: (1, 0, 0)}
    assert cost_knn_color(cache([1.0]), unit, 1, sigma_c=1.0, normalized=True) == pytest.approx(math.exp(-1), rel=1e-15)
    assert float(color_weight((0, 0, 0), (255, 0, 0), 1.0)) == pytest.approx(math.exp(-1))


def test_yuksel_examples():
    assert yuksel_radius(1.0, 1) == pytest.approx(1.122462, abs=1e-6)
    assert yuksel_radius(1.0, 1) == pytest.approx(2 * (1 / (4 * math.sqrt(2))) ** (1 / 3), rel=1e-15)
    assert yuksel_rmin(1.0, 0.1, 1.5, 0.65) == pytest.approx(0.629445, abs=1e-6)
    params = YukselParams(alpha=8, beta=0.0)
    assert yuksel_cost([Neighbor(1, 0.5)], params, r=1.0) == 0.00390625
    with pytest.raises(ConfigError):
        yuksel_radius(0.0, 5)
    with pytest.raises(ConfigError):
        yuksel_radius(1.0, 0)
    with pytest.raises(ConfigError):
        YukselParams(volume=1.0, current_count=0).radius()


def test_yuksel_clamp_boundary_and_cutoff():
    r, rmin = 1.0, 0.4
    w = yuksel_weight([0.1, 0.4, 0.7, 1.0, 2.0], r, rmin, 8.0)
    assert w[0] == w[1] == (1 - 0.4) ** 8
    assert w[2] == (1 - 0.7) ** 8
    assert w[3] == 0.0 and w[4] == 0.0
    # beta = 0 means no clamp at all
    assert yuksel_rmin(1.0, 0.1, 1.5, 0.0) == 0.0


def test_config_validation():
    for bad in (dict(k=0), dict(epsilon_d=0), dict(sigma_c=-1), dict(kind="nope")):
        with pytest.raises(ConfigError):
            CostConfig(**bad)
    for bad in (dict(alpha=0), dict(beta=1.5), dict(lam=1.0)):
        with pytest.raises(ConfigError):
            YukselParams(**bad)
    assert CostConfig("k1").effective_k == 1
    assert CostKind.parse("NORMAL") is CostKind.KNN_NORMAL


def test_cost_value_order():
    assert CostValue(1.0, 2) < CostValue(1.0, 3) < CostValue(2.0, 0)
    with pytest.raises(ConfigError):
        CostValue(float("inf"), 0)
    with pytest.raises(ConfigError):
        CostValue(-1.0, 0)


def test_dispatch():
    c = cache([1.0, 2.0, 4.0], k=2)
    normals = {i: (1, 0, 0) for i in range(4)}
    colors = {i: (0, 0, 0) for i in range(4)}
    assert cache_cost(c, CostConfig("k1")) == 1.0
    assert cache_cost(c, CostConfig("knn", k=2)) == 1.25
    assert cache_cost(c, CostConfig("normal", k=2), normals=normals) == 1.25
    assert cache_cost(c, CostConfig("color", k=2), colors=colors) == 1.25
    with pytest.raises(ConfigError):
        cache_cost(c, CostConfig("normal"))


def brute_costs(p, k):
    ids = np.arange(len(p))
    return [knn_cost([d for _, d in linear_knn(p, ids, p[i], k, exclude=i)], k) for i in range(len(p))]


@pytest.mark.parametrize("k", [1, 3, 6])
def test_knn_costs_match_brute_force(k):
    p = np.random.default_rng(k).random((200, 3))
    tree = KdTree(np.arange(200), p)
    idx, d = tree.knn_batch(p, 14, exclude=np.arange(200))
    got = [cost_knn(NeighborCache(i, k, idx[i], d[i]), k) for i in range(200)]
    for g, w in zip(got, brute_costs(p, k)):
        assert g == pytest.approx(w, rel=1e-12)


@settings(max_examples=25)
@given(st.integers(0, 2**31), st.sampled_from([1, 3, 6]))
def test_removal_never_raises_costs(seed, k):
    rng = np.random.default_rng(seed)
    p = rng.random((60, 3))
    before = brute_costs(p, k)
    gone = int(rng.integers(60))
    keep = np.delete(np.arange(60), gone)
    after = brute_costs(p[keep], k)
    for row, c in zip(keep, after):
        assert c <= before[row] * (1 + 1e-12)


@given(st.lists(st.floats(0.01, 10), min_size=1, max_size=14), st.integers(0, 13), st.floats(1.0, 5.0),
       st.integers(1, 14))
def test_moving_a_neighbor_farther_never_raises_cost(dists, j, factor, k):
    d = sorted(dists)
    j = j % len(d)
    far = list(d)
    far[j] *= factor
    normals = {i: (0.0, 0.6, 0.8) for i in range(len(d) + 1)}
    normals[0] = (0.0, 0.0, 1.0)
    for kind in ("knn", "normal", "color"):
        cfg = CostConfig(kind, k=k)
        colors = {i: (i * 9 % 256, 3, 7) for i in range(len(d) + 1)}
        a = cache_cost(cache(d, k), cfg, normals, colors)
        b = cache_cost(cache(far, k), cfg, normals, colors)
        assert b <= a * (1 + 1e-12)
    w_near = yuksel_weight(np.array(d), 3.0, 0.5, 8.0)
    w_far = yuksel_weight(np.array(far), 3.0, 0.5, 8.0)
    assert w_far[j] <= w_near[j]


def test_scale_covariance():
    p = np.random.default_rng(4).random((100, 3))
    a = np.array(brute_costs(p, 6))
    b = np.array(brute_costs(p * 3.0, 6))
    assert np.allclose(b, a / 9.0, rtol=1e-12)
    assert np.array_equal(np.argsort(a, kind="stable"), np.argsort(b, kind="stable"))


def test_vectorized_helpers():
    assert np.array_equal(inverse_square([0.0, 2.0]), [1e12, 0.25])
    assert float(normal_weight((1, 0, 0), (-1, 0, 0))) == 0.0
    contrib = np.array([[1.0, 2.0, 4.0, 8.0]])
    valid = np.array([[True, False, True, True]])
    assert sum_first_k(contrib, valid, 2)[0] == 5.0
