import math

import numpy as np
import pytest

from oracles import ray_triangle_brute
from pdsub.errors import ConfigError, DataError
from pdsub.scan_sim import (ScannerSpec, elevation_band_counts, intersect, make_cube_mesh, make_sphere_mesh,
                            make_square_mesh, multi_scan, read_obj, read_poses, sample_surface, scan, write_obj,
                            write_poses)
from pdsub.scenario import CubeScenario

STEP = math.radians(3)


def spec(pos=(0, 0, 0), sigma=0.0, seed=0, **kw):
    return ScannerSpec(pos, STEP, STEP, range_noise_sigma=sigma, seed=seed, **kw)


def test_cube_mesh_geometry():
    m = make_cube_mesh(10.0)
    assert m.area() == pytest.approx(600.0)
    assert m.vertices.shape == (8, 3) and len(m) == 12
    axes = np.vstack([np.eye(3), -np.eye(3)])
    t, tri = intersect(m, (0, 0, 0), axes)
    assert np.allclose(t, 5.0, rtol=0, atol=1e-12) and (tri >= 0).all()
    # outward normals point away from the center
    centers = sum(m.corners()) / 3
    assert (np.sum(m.normals * centers, axis=1) > 0).all()
    inward = make_cube_mesh(10.0, inward=True)
    assert (np.sum(inward.normals * centers, axis=1) < 0).all()


def test_square_facing_scanner_is_planar():
    m = make_square_mesh(4.0, center=(3.0, 0, 0), normal_axis=0)
    c = scan(m, spec(elevation_range=(-0.5, 0.5)))
    assert len(c) > 0
    assert np.max(np.abs(c.positions[:, 0] - 3.0)) <= 1e-9


def test_closed_cube_every_ray_hits():
    s = spec((0.3, -1.0, 2.0))
    c = scan(make_cube_mesh(10.0, inward=True), s)
    assert len(c) == s.ray_count == len(s.azimuths()) * len(s.elevations())
    on_face = np.isclose(np.abs(c.positions), 5.0, rtol=0, atol=1e-9).any(axis=1)
    assert on_face.all()


def test_sphere_density_grows_toward_poles():
    s = ScannerSpec((0, 0, 0), math.radians(2.5), math.radians(2.5), range_noise_sigma=0.0)
    c = scan(make_sphere_mesh(5.0, n_lat=36, n_lon=72), s)
    edges = np.radians(np.arange(-80, 81, 20) - 1.0)
    counts = elevation_band_counts(c, (0, 0, 0), edges)
    assert counts.max() - counts.min() <= 0.02 * counts.mean()
    band_area = 2 * math.pi * 25 * np.diff(np.sin(edges))
    density = counts / band_area
    mid = 0.5 * (edges[1:] + edges[:-1])
    ratio = density * np.cos(mid)
    assert np.allclose(ratio, ratio.mean(), rtol=0.03)
    assert density[0] > density[len(density) // 2] and density[-1] > density[len(density) // 2]


def test_multi_scan():
    m = make_cube_mesh(10.0, inward=True)
    one = spec((1, 1, 1), sigma=0.001, seed=3)
    a, b = scan(m, one), multi_scan(m, [one])
    assert np.array_equal(a.positions, b.positions)
    twin = multi_scan(m, [spec((1, 1, 1)), spec((1, 1, 1))])
    n = len(twin) // 2
    assert np.array_equal(twin.positions[:n], twin.positions[n:])
    specs = [spec(p, 0.0004, i) for i, p in enumerate(CubeScenario().poses())]
    total = multi_scan(m, specs)
    assert len(total) == sum(len(scan(m, s)) for s in specs)
    assert list(total.ids) == list(range(len(total)))
    with pytest.raises(ConfigError):
        multi_scan(m, [])


def test_determinism_and_noise_along_ray():
    m = make_cube_mesh(10.0, inward=True)
    s = spec((0.5, 0.2, -0.3), sigma=0.01, seed=9)
    a, b = scan(m, s), scan(m, s)
    assert np.array_equal(a.positions, b.positions)
    clean = scan(m, spec((0.5, 0.2, -0.3)))
    delta = a.positions - clean.positions
    dirs = s.directions()
    cross = np.cross(delta, dirs[:len(delta)])
    assert np.abs(cross).max() < 1e-9
    assert 0.005 < np.std(np.linalg.norm(delta, axis=1)) < 0.02


def test_normals_face_the_scanner():
    c = scan(make_cube_mesh(10.0, inward=True), spec((1, 2, 0)))
    toward = np.array([1, 2, 0]) - c.positions
    assert (np.sum(c.normals * toward, axis=1) > 0).all()


def test_max_range():
    c = scan(make_cube_mesh(10.0, inward=True), spec(max_range=6.0))
    assert len(c) and np.linalg.norm(c.positions, axis=1).max() <= 6.0 + 1e-12


def test_intersect_matches_brute_force():
    rng = np.random.default_rng(0)
    meshes = [make_cube_mesh(4.0, center=(0.5, 0, 0)), make_sphere_mesh(3.0, n_lat=6, n_lon=8)]
    for mesh in meshes:
        for _ in range(60):
            o = rng.uniform(-6, 6, 3)
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            t, tri = intersect(mesh, o, d[None])
            hits = [ray_triangle_brute(o, d, *(c[i] for c in mesh.corners())) for i in range(len(mesh))]
            hits = [h for h in hits if h is not None]
            if hits:
                assert t[0] == pytest.approx(min(hits), rel=1e-9)
            else:
                assert tri[0] == -1 and np.isinf(t[0])


def test_edge_ray_is_not_lost():
    m = make_cube_mesh(2.0)
    # straight at a face diagonal shared by two triangles, and at a corner
    t, tri = intersect(m, (-5, 0, 0), np.array([[1.0, 0, 0]]))
    assert t[0] == pytest.approx(4.0) and tri[0] >= 0
    corner = np.array([[1.0, 1.0, 1.0]]) / math.sqrt(3)
    t, tri = intersect(m, (0, 0, 0), corner)
    assert t[0] == pytest.approx(math.sqrt(3)) and tri[0] >= 0


def test_sample_surface_uniform_by_area():
    c = sample_surface(make_cube_mesh(2.0), 60_000, seed=1)
    faces = np.argmax(np.abs(c.positions), axis=1) * 2 + (c.positions.max(axis=1) > np.abs(c.positions.min(axis=1)))
    counts = np.bincount(faces, minlength=6)
    assert np.allclose(counts, 10_000, rtol=0.05)
    assert np.allclose(np.abs(c.positions).max(axis=1), 1.0)


def test_spec_validation():
    with pytest.raises(ConfigError):
        ScannerSpec(azimuth_step=0)
    with pytest.raises(ConfigError):
        ScannerSpec(range_noise_sigma=-1)
    with pytest.raises(ConfigError):
        ScannerSpec(elevation_range=(1, 0))


def test_obj_and_pose_files(tmp_path):
    m = make_cube_mesh(3.0)
    write_obj(tmp_path / "m.obj", m)
    back = read_obj(tmp_path / "m.obj")
    assert np.array_equal(back.vertices, m.vertices) and np.array_equal(back.triangles, m.triangles)
    write_poses(tmp_path / "p.txt", [(1, 2, 3), (0.5, 0, -1)])
    assert read_poses(tmp_path / "p.txt") == [(1.0, 2.0, 3.0), (0.5, 0.0, -1.0)]
    (tmp_path / "bad.obj").write_text("v 0 0 0\nf 1 2 3 4\n")
    with pytest.raises(DataError):
        read_obj(tmp_path / "bad.obj")
    (tmp_path / "bad.txt").write_text("1 2\n")
    with pytest.raises(DataError):
        read_poses(tmp_path / "bad.txt")


def test_cube_scenario():
    sc = CubeScenario(points=8000)
    assert sc.scanned_area == 600.0
    c = sc.simulate()
    assert 7000 < len(c) < 9500
    assert np.array_equal(c.positions, sc.simulate().positions)
    h = sc.side / 2 - sc.margin
    assert all(max(abs(v) for v in p) <= h for p in sc.poses())
