import os
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pdsub import PointCloud, VoxelStore
from pdsub.errors import ConfigError, StoreCorruptionError
from pdsub.ply import write_ply
from pdsub.voxel_store import MANIFEST, Manifest, pack_keys, unpack_keys, voxel_filename


def build(tmp_path, positions, size, name="s", **kw):
    c = PointCloud.from_positions(np.asarray(positions, float), **kw)
    path = tmp_path / f"{name}.ply"
    write_ply(path, c, ids=True)
    return c, VoxelStore.build(path, size, tmp_path / name)


def test_cube_corners_one_point_per_voxel(tmp_path):
    corners = [(x, y, z) for x in (0, 10) for y in (0, 10) for z in (0, 10)]
    _, store = build(tmp_path, corners, 10.0)
    m = store.manifest
    assert len(m) == 8 and list(m.counts) == [1] * 8
    assert sorted(map(tuple, m.keys)) == sorted((x, y, z) for x in (0, 1) for y in (0, 1) for z in (0, 1))


def test_single_voxel(tmp_path):
    p = np.random.default_rng(0).random((1000, 3)) * 0.9
    _, store = build(tmp_path, p, 1.0)
    assert len(store.manifest) == 1 and store.manifest.total_points == 1000
    assert len([f for f in os.listdir(store.directory) if f.startswith("vx_")]) == 1


def test_counts_match_grouping_oracle(tmp_path):
    p = np.random.default_rng(1).random((10_000, 3)) * 20
    _, store = build(tmp_path, p, 5.0)
    keys = np.floor((p - p.min(axis=0)) / 5.0).astype(int)
    want = Counter(map(tuple, keys))
    got = {tuple(e.key): e.point_count for e in store.manifest.entries()}
    assert got == dict(want)


def test_roundtrip_and_partition(tmp_path):
    rng = np.random.default_rng(2)
    n = 3000
    nr = rng.normal(size=(n, 3))
    nr /= np.linalg.norm(nr, axis=1, keepdims=True)
    c, store = build(tmp_path, rng.random((n, 3)) * 7, 1.3, normals=nr, colors=rng.integers(0, 256, (n, 3)))
    back = VoxelStore.open(store.directory).to_cloud()
    assert np.array_equal(back.ids, c.ids)
    assert np.array_equal(back.positions, c.positions)
    assert np.array_equal(back.normals, c.normals)
    assert np.array_equal(back.colors, c.colors)
    seen = set()
    m = store.manifest
    for page in store.iter_pages():
        assert (m.key_of(page.positions) == np.array(page.key)).all()
        ids = set(int(i) for i in page.ids)
        assert not ids & seen
        seen |= ids
    assert len(seen) == n == m.total_points


def test_build_is_deterministic(tmp_path):
    p = np.random.default_rng(3).random((2000, 3)) * 4
    _, a = build(tmp_path, p, 1.0, name="a")
    _, b = build(tmp_path, p, 1.0, name="b")
    assert a.manifest.to_text() == b.manifest.to_text()
    for name in os.listdir(a.directory):
        with open(os.path.join(a.directory, name), "rb") as fa, open(os.path.join(b.directory, name), "rb") as fb:
            assert fa.read() == fb.read()


def test_boundary_point_goes_to_higher_voxel(tmp_path):
    _, store = build(tmp_path, [(0, 0, 0), (1, 0, 0), (2, 0, 0)], 1.0)
    assert sorted(map(tuple, store.manifest.keys)) == [(0, 0, 0), (1, 0, 0), (2, 0, 0)]


@pytest.mark.parametrize("size", [0.0, -1.0, float("nan")])
def test_bad_voxel_size(tmp_path, size):
    with pytest.raises(ConfigError):
        build(tmp_path, [(0, 0, 0)], size)


def block(tmp_path, n, name="s"):
    pts = [(i + 0.5, j + 0.5, k + 0.5) for i in range(n) for j in range(n) for k in range(n)]
    return build(tmp_path, pts, 1.0, name=name)[1]


def test_load_neighborhood_counts(tmp_path):
    lone = build(tmp_path, [(0.5, 0.5, 0.5), (5.5, 5.5, 5.5)], 1.0, name="lone")[1]
    assert len(lone.load_neighborhood((0, 0, 0))) == 1
    full = block(tmp_path, 3, "full")
    pages = full.load_neighborhood((1, 1, 1))
    assert len(pages) == 27
    assert pages[0].key == (1, 1, 1)
    rest = [p.key for p in pages[1:]]
    assert rest == sorted(rest)
    small = block(tmp_path, 2, "small")
    assert len(small.load_neighborhood((0, 0, 0))) == 8


def test_missing_voxel_file_is_corruption(tmp_path):
    store = block(tmp_path, 2)
    os.unlink(store.voxel_path((1, 1, 1)))
    with pytest.raises(StoreCorruptionError):
        store.load_neighborhood((0, 0, 0))
    with pytest.raises(StoreCorruptionError):
        VoxelStore.open(store.directory)


def test_commit_removals(tmp_path):
    p = np.random.default_rng(4).random((100, 3)) * 0.5
    _, store = build(tmp_path, p, 1.0)
    key = store.manifest.key(0)
    path = store.voxel_path(key)
    before = open(path, "rb").read()
    page = store.load_page(key)
    store.commit_removals(page)
    assert open(path, "rb").read() == before

    page = store.load_page(key)
    page.set_alive(np.arange(100) % 2 == 0)
    entry = store.commit_removals(page)
    assert entry.point_count == 50
    reopened = VoxelStore.open(store.directory)
    assert set(int(i) for i in reopened.load_page(key).ids) == set(range(0, 100, 2))

    page = reopened.load_page(key)
    page.set_alive(np.zeros(len(page), bool))
    assert reopened.commit_removals(page) is None
    assert not os.path.exists(path)
    assert key not in VoxelStore.open(reopened.directory).manifest


def test_manifest_text_roundtrip(tmp_path):
    store = block(tmp_path, 3)
    m = store.manifest
    m.max_cost[3] = 1.5
    m.dirty[2] = 4
    again = Manifest.from_text(m.to_text())
    assert again.to_text() == m.to_text()
    text = (tmp_path / "s" / MANIFEST).read_text()
    assert text.startswith("origin ")
    assert "voxel 0 0 0 1 - 0" in text


def test_manifest_detects_bad_total():
    m = Manifest((0, 0, 0), 1.0, pack_keys(np.array([[0, 0, 0]])), [3])
    text = m.to_text().replace("total_points 3", "total_points 4")
    with pytest.raises(StoreCorruptionError):
        Manifest.from_text(text)


@given(st.lists(st.tuples(*[st.integers(-(1 << 20), (1 << 20) - 1)] * 3), min_size=1, max_size=50))
def test_key_packing_roundtrip_and_order(keys):
    k = np.array(keys, dtype=np.int64)
    packed = pack_keys(k)
    assert np.array_equal(unpack_keys(packed), k)
    order = np.argsort(packed, kind="stable")
    lex = sorted(range(len(keys)), key=lambda i: (keys[i], i))
    assert [keys[i] for i in order] == [keys[i] for i in lex]


def test_voxel_filename():
    assert voxel_filename((1, -2, 3)) == "vx_1_-2_3.bin"


@settings(max_examples=15)
@given(st.integers(0, 2**31), st.floats(0.2, 3.0))
def test_partition_property(seed, size):
    import tempfile
    p = np.random.default_rng(seed).normal(size=(300, 3))
    with tempfile.TemporaryDirectory() as d:
        store = VoxelStore.from_cloud(PointCloud.from_positions(p), size, d)
        assert store.manifest.total_points == 300
        assert np.array_equal(store.to_cloud().positions, p)
