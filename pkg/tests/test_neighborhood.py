import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import lattice, linear_knn
from pdsub import PointCloud, VoxelStore
from pdsub.errors import ConfigError
from pdsub.neighborhood import (KdTree, Neighbor, NeighborCache, ReverseIndex, build_caches,
                                build_kdtree, invalidate, knn)


def as_pairs(neighbors):
    return [(n.id, n.dist) for n in neighbors]


def test_empty_tree_rejected():
    with pytest.raises(ConfigError):
        build_kdtree([])


def test_single_point_excluding_itself():
    tree = build_kdtree([(7, (1.0, 2.0, 3.0))])
    assert knn(tree, (1.0, 2.0, 3.0), 1, exclude=7) == []


def test_collinear():
    tree = build_kdtree([(0, (0, 0, 0)), (1, (1, 0, 0)), (2, (3, 0, 0))])
    assert as_pairs(knn(tree, (1, 0, 0), 1, exclude=1)) == [(0, 1.0)]


def test_lattice_axis_neighbors():
    p = lattice(5, 5) + 0.0
    p = np.vstack([p, p + [0, 0, 1], p + [0, 0, 2]])
    tree = KdTree(np.arange(len(p)), p)
    center = 25 + 12
    got = knn(tree, p[center], 6, exclude=center)
    assert [n.dist for n in got] == [1.0] * 6
    assert sorted(n.id for n in got) == sorted([12, 62, 25 + 7, 25 + 17, 25 + 11, 25 + 13])


def test_duplicate_twin():
    tree = KdTree([0, 1, 2], [(0, 0, 0), (5, 5, 5), (5, 5, 5)])
    assert as_pairs(knn(tree, (5, 5, 5), 1, exclude=1)) == [(2, 0.0)]


def test_matches_linear_scan():
    rng = np.random.default_rng(0)
    p = rng.random((500, 3))
    ids = np.arange(500) * 2 + 3
    tree = KdTree(ids, p)
    for q in rng.random((50, 3)):
        assert as_pairs(tree.knn(q, 6)) == linear_knn(p, ids, q, 6)
    for row in rng.choice(500, 20, replace=False):
        assert as_pairs(tree.knn(p[row], 6, exclude=int(ids[row]))) == linear_knn(p, ids, p[row], 6,
                                                                                 exclude=ids[row])


@settings(max_examples=60)
@given(st.integers(1, 80), st.integers(1, 20), st.integers(0, 2**31), st.booleans())
def test_knn_property(n, count, seed, quantize):
    rng = np.random.default_rng(seed)
    p = rng.random((n, 3))
    if quantize:  # many exact ties and duplicates
        p = np.round(p * 3) / 3
    ids = np.sort(rng.choice(10 * n + 10, n, replace=False))
    tree = KdTree(ids, p)
    q = p[rng.integers(n)] if quantize else rng.random(3)
    assert as_pairs(tree.knn(q, count)) == linear_knn(p, ids, q, count)


def test_batch_accept_filter():
    rng = np.random.default_rng(5)
    p = rng.random((200, 3))
    ids = np.arange(200)
    tree = KdTree(ids, p)
    q = rng.random((30, 3))
    idx, d = tree.knn_batch(q, 5, accept=lambda rows, cand: cand % 3 == 0)
    for r in range(30):
        want = linear_knn(p, ids, q[r], 5, accept=lambda i: i % 3 == 0)
        assert [(int(i), float(x)) for i, x in zip(idx[r], d[r])] == want


def test_short_result_is_padded():
    tree = KdTree([0, 1], [(0, 0, 0), (1, 0, 0)])
    idx, d = tree.knn_batch([(0, 0, 0)], 4, exclude=[0])
    assert list(idx[0]) == [1, -1, -1, -1]
    assert d[0, 0] == 1.0 and np.isinf(d[0, 1:]).all()


def test_neighbor_rejects_negative_distance():
    with pytest.raises(ConfigError):
        Neighbor(1, -0.5)


def cache(ids, dists, k=6):
    return NeighborCache(0, k, np.array(ids), np.array(dists, float))


def test_invalidate_non_member():
    c = cache([1, 2, 3], [1, 2, 3], k=2)
    d = invalidate(c, 99)
    assert d.valid_count == 3 and not d.dirty


def test_invalidate_exhaustion():
    c = cache([5], [1.0], k=1)
    assert not c.dirty
    assert invalidate(c, 5).dirty


@given(st.lists(st.integers(1, 14), max_size=14, unique=True))
def test_invalidate_dirty_rule(removed):
    c = cache(list(range(1, 15)), np.arange(1, 15) * 0.1)
    for pid in removed[:8]:
        c = invalidate(c, pid)
    left = 14 - len(removed[:8])
    assert c.valid_count == left
    assert c.dirty == (left < 6)
    assert [n.id for n in c.first_k_valid()] == [i for i in range(1, 15) if i not in removed[:8]][:6]


def test_short_buffer_never_dirty_until_drained():
    c = cache([1, 2], [0.5, 0.7], k=6)
    assert not c.dirty
    assert invalidate(c, 1).dirty


def test_reverse_index():
    a = NeighborCache(1, 2, np.array([2, 3, 4]), np.array([1.0, 2, 3]))
    b = NeighborCache(2, 2, np.array([1, 4, 3]), np.array([1.0, 2, 3]))
    rev = ReverseIndex.from_caches([a, b])
    assert rev[2] == {1} and rev[3] == {1} and rev[4] == {2} and rev[1] == {2}
    rev.discard(a)
    rev.add(invalidate(a, 2))
    assert rev[2] == set() and rev[4] == {1, 2}


def store_of(tmp_path, positions, size, name="s"):
    return VoxelStore.from_cloud(PointCloud.from_positions(positions), size, tmp_path / name)


def test_isolated_point_has_empty_cache(tmp_path):
    store = store_of(tmp_path, np.array([[0.5, 0.5, 0.5], [9.5, 9.5, 9.5]]), 1.0)
    caches, rev = build_caches(store.load_neighborhood((0, 0, 0)), 6, 8)
    assert len(caches[0]) == 0 and caches[0].valid_count == 0
    assert rev.entries == {}


def test_pair_across_voxel_boundary(tmp_path):
    # the grid origin is the bounding-box minimum, so a far corner point pins it at 0
    p = np.array([[0.0, 0.0, 0.0], [0.95, 0.5, 0.5], [1.05, 0.5, 0.5]])
    store = store_of(tmp_path, p, 1.0)
    for key, me, other in (((0, 0, 0), 1, 2), ((1, 0, 0), 2, 1)):
        caches, _ = build_caches(store.load_neighborhood(key), 1, 0)
        assert [n.id for n in caches[me].neighbors] == [other]


def test_caches_match_global_oracle(tmp_path):
    p = np.random.default_rng(9).random((2000, 3)) * 2
    store = store_of(tmp_path, p, 1.0)
    assert len(store.manifest) == 8
    ids = np.arange(2000)
    total = 0
    for key in map(tuple, store.manifest.keys):
        caches, rev = build_caches(store.load_neighborhood(key), 6, 8)
        for pid, c in caches.items():
            assert as_pairs(c.neighbors) == linear_knn(p, ids, p[pid], 14, exclude=pid)
            for nb in c.first_k_valid():
                assert pid in rev[nb.id]
        total += len(caches)
    assert total == 2000


def test_caches_restricted_to_adjacent_voxels(tmp_path):
    # a point 2 voxels away is invisible even when it is the nearest candidate
    p = np.array([[0.5, 0.5, 0.5], [2.6, 0.5, 0.5], [0.5, 0.5, 3.9]])
    store = store_of(tmp_path, p, 1.0)
    caches, _ = build_caches(store.load_neighborhood((0, 0, 0)), 6, 8)
    assert len(caches[0]) == 0
