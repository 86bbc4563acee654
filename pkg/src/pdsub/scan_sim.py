"""Synthetic terrestrial LiDAR scans of triangle meshes.

A scanner sweeps a regular grid of polar angles (azimuth theta, elevation psi),
casts one ray per direction and records the nearest hit, perturbed along the ray by
Gaussian range noise. The regular angular grid is what produces the strongly
uneven surface density typical of real scans (dense near the scanner and toward the
poles of the sweep).
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import PointCloud
from .errors import ConfigError, DataError

DEFAULT_RANGE_SIGMA = 0.0004
_BARY_EPS = 1e-12
_T_MIN = 1e-9
_RAY_BLOCK_ELEMS = 1 << 21


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray = field(init=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ConfigError("triangle index out of range")
        v0, v1, v2 = self.corners()
        cross = np.cross(v1 - v0, v2 - v0)
        norm = np.linalg.norm(cross, axis=1)
        if np.any(norm <= 0):
            raise ConfigError("degenerate triangle (zero area)")
        self.normals = cross / norm[:, None]

    def corners(self):
        t = self.triangles
        return self.vertices[t[:, 0]], self.vertices[t[:, 1]], self.vertices[t[:, 2]]

    def face_areas(self) -> np.ndarray:
        v0, v1, v2 = self.corners()
        return 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def __len__(self) -> int:
        return len(self.triangles)


@dataclass(frozen=True)
class ScannerSpec:
    position: tuple = (0.0, 0.0, 0.0)
    azimuth_step: float = math.radians(0.5)
    elevation_step: float = math.radians(0.5)
    elevation_range: tuple = (-math.pi / 2, math.pi / 2)
    range_noise_sigma: float = DEFAULT_RANGE_SIGMA
    max_range: float = math.inf
    seed: int = 0

    def __post_init__(self):
        pos = tuple(float(v) for v in self.position)
        if len(pos) != 3 or not all(math.isfinite(v) for v in pos):
            raise ConfigError("scanner position must be 3 finite reals")
        object.__setattr__(self, "position", pos)
        if not (self.azimuth_step > 0 and self.elevation_step > 0):
            raise ConfigError("angular steps must be positive")
        lo, hi = (float(v) for v in self.elevation_range)
        if not lo < hi:
            raise ConfigError("elevation range must satisfy min < max")
        object.__setattr__(self, "elevation_range", (lo, hi))
        if self.range_noise_sigma < 0:
            raise ConfigError("range noise sigma must be non-negative")
        if not self.max_range > 0:
            raise ConfigError("max_range must be positive")

    def azimuths(self) -> np.ndarray:
        n = int(math.ceil(2 * math.pi / self.azimuth_step - 1e-9))
        return np.arange(n) * self.azimuth_step

    def elevations(self) -> np.ndarray:
        lo, hi = self.elevation_range
        n = int(math.floor((hi - lo) / self.elevation_step + 1e-9)) + 1
        return lo + np.arange(n) * self.elevation_step

    @property
    def ray_count(self) -> int:
        return len(self.azimuths()) * len(self.elevations())

    def directions(self) -> np.ndarray:
        """Unit ray directions, elevation-major then azimuth."""
        psi, theta = np.meshgrid(self.elevations(), self.azimuths(), indexing="ij")
        psi = psi.ravel()
        theta = theta.ravel()
        c = np.cos(psi)
        return np.stack([c * np.cos(theta), c * np.sin(theta), np.sin(psi)], axis=1)


def intersect(mesh: TriangleMesh, origin, directions, max_range: float = math.inf):
    """Nearest hit of each ray from ``origin``.

    Uses the Moller-Trumbore test with inclusive edges so rays through shared edges
    or vertices are never lost; equal distances resolve to the lowest triangle index.

    Returns
    -------
    t : (n,) hit distance, inf where nothing is hit within ``max_range``
    tri : (n,) triangle index, -1 where nothing is hit
    """
    o = np.asarray(origin, dtype=np.float64).reshape(3)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    v0, v1, v2 = mesh.corners()
    e1 = v1 - v0
    e2 = v2 - v0
    s = o - v0
    n = len(d)
    best_t = np.full(n, np.inf)
    best_tri = np.full(n, -1, dtype=np.int64)
    block = max(1, _RAY_BLOCK_ELEMS // max(1, len(mesh)))
    for a in range(0, n, block):
        dd = d[a:a + block, None, :]
        p = np.cross(dd, e2[None])
        det = np.sum(e1[None] * p, axis=-1)
        ok = np.abs(det) > 1e-300
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        u = np.sum(s[None] * p, axis=-1) * inv
        q = np.cross(s, e1)
        v = np.sum(dd * q[None], axis=-1) * inv
        t = np.sum(e2 * q, axis=-1)[None] * inv
        hit = ok & (u >= -_BARY_EPS) & (v >= -_BARY_EPS) & (u + v <= 1 + _BARY_EPS) & (t > _T_MIN) & (t <= max_range)
        t = np.where(hit, t, np.inf)
        j = np.argmin(t, axis=1)
        tt = t[np.arange(len(j)), j]
        best_t[a:a + block] = tt
        best_tri[a:a + block] = np.where(np.isfinite(tt), j, -1)
    return best_t, best_tri


def scan(mesh: TriangleMesh, spec: ScannerSpec) -> PointCloud:
    if len(mesh) == 0:
        raise ConfigError("cannot scan an empty mesh")
    o = np.asarray(spec.position)
    d = spec.directions()
    t, tri = intersect(mesh, o, d, spec.max_range)
    hit = tri >= 0
    d, t, tri = d[hit], t[hit], tri[hit]
    rng = np.random.default_rng(spec.seed)
    if spec.range_noise_sigma > 0:
        t = t + rng.normal(0.0, spec.range_noise_sigma, size=len(t))
    pos = o + t[:, None] * d
    nrm = mesh.normals[tri].copy()
    flip = np.sum(nrm * d, axis=1) > 0
    nrm[flip] *= -1.0
    return PointCloud(np.arange(len(pos), dtype=np.uint64), pos, nrm.astype(np.float32))


def multi_scan(mesh: TriangleMesh, specs: Sequence[ScannerSpec]) -> PointCloud:
    specs = list(specs)
    if not specs:
        raise ConfigError("need at least one scanner pose")
    return PointCloud.concatenate([scan(mesh, s) for s in specs], renumber=True)


# -- meshes -----------------------------------------------------------------

def sample_surface(mesh: TriangleMesh, count: int, seed: int = 0) -> PointCloud:
    """``count`` points drawn uniformly by area over ``mesh``, with face normals."""
    if count < 0:
        raise ConfigError("count must be non-negative")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    tri = rng.choice(len(areas), size=count, p=areas / areas.sum())
    u, v = rng.random(count), rng.random(count)
    flip = u + v > 1.0
    u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
    v0, v1, v2 = (c[tri] for c in mesh.corners())
    pos = v0 + u[:, None] * (v1 - v0) + v[:, None] * (v2 - v0)
    return PointCloud.from_positions(pos, normals=mesh.normals[tri])


def make_cube_mesh(side: float, center=(0.0, 0.0, 0.0), inward: bool = False) -> TriangleMesh:
    """Axis-aligned cube of 8 vertices and 12 triangles (normals outward unless ``inward``)."""
    if not side > 0:
        raise ConfigError("cube side must be positive")
    h = side / 2.0
    c = np.asarray(center, dtype=np.float64)
    v = np.array([[x, y, z] for x in (-h, h) for y in (-h, h) for z in (-h, h)]) + c
    # vertex index = 4*(x>0) + 2*(y>0) + (z>0); each face listed counter-clockwise seen from outside
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    tris = []
    for a, b, cc, d in quads:
        tris += [(a, b, cc), (a, cc, d)]
    tris = np.array(tris)
    if inward:
        tris = tris[:, ::-1]
    return TriangleMesh(v, tris)


def make_square_mesh(side: float, center=(0.0, 0.0, 0.0), normal_axis: int = 0) -> TriangleMesh:
    """A square of two triangles perpendicular to ``normal_axis``."""
    h = side / 2.0
    a, b = [ax for ax in range(3) if ax != normal_axis]
    v = np.zeros((4, 3))
    for i, (s, t) in enumerate([(-h, -h), (h, -h), (h, h), (-h, h)]):
        v[i, a] = s
        v[i, b] = t
    return TriangleMesh(v + np.asarray(center, dtype=np.float64), [(0, 1, 2), (0, 2, 3)])


def make_sphere_mesh(radius: float, center=(0.0, 0.0, 0.0), n_lat: int = 32, n_lon: int = 64) -> TriangleMesh:
    """UV sphere with poles as single vertices."""
    if not radius > 0 or n_lat < 2 or n_lon < 3:
        raise ConfigError("invalid sphere parameters")
    verts = [(0.0, 0.0, radius)]
    for i in range(1, n_lat):
        phi = math.pi * i / n_lat
        for j in range(n_lon):
            th = 2 * math.pi * j / n_lon
            verts.append((radius * math.sin(phi) * math.cos(th), radius * math.sin(phi) * math.sin(th),
                          radius * math.cos(phi)))
    verts.append((0.0, 0.0, -radius))
    south = len(verts) - 1
    ring = lambda i, j: 1 + (i - 1) * n_lon + (j % n_lon)
    tris = []
    for j in range(n_lon):
        tris.append((0, ring(1, j), ring(1, j + 1)))
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            tris += [(a, c, d), (a, d, b)]
    for j in range(n_lon):
        tris.append((south, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)))
    return TriangleMesh(np.array(verts) + np.asarray(center, dtype=np.float64), tris)


# -- OBJ / pose files ---------------------------------------------------------

def read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            tok = line.split()
            if not tok or tok[0].startswith("#"):
                continue
            try:
                if tok[0] == "v":
                    verts.append([float(x) for x in tok[1:4]])
                elif tok[0] == "f":
                    idx = [int(t.split("/")[0]) for t in tok[1:]]
                    if len(idx) != 3:
                        raise DataError(f"{path}:{lineno}: only triangular faces are supported")
                    faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed line {line.strip()!r}") from None
    if not faces:
        raise DataError(f"{path}: no faces")
    try:
        return TriangleMesh(np.array(verts), np.array(faces))
    except ConfigError as exc:
        raise DataError(f"{path}: {exc}") from None


def write_obj(path, mesh: TriangleMesh):
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write("v " + " ".join(repr(float(x)) for x in v) + "\n")
        for t in mesh.triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def read_poses(path) -> list:
    """One scanner position ``x y z`` per line; blank lines and ``#`` comments ignored."""
    poses = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#")[0].strip()
            if not line:
                continue
            try:
                xyz = [float(v) for v in line.replace(",", " ").split()]
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed pose {line!r}") from None
            if len(xyz) != 3:
                raise DataError(f"{path}:{lineno}: a pose needs 3 coordinates")
            poses.append(tuple(xyz))
    return poses


def write_poses(path, poses):
    with open(path, "w") as f:
        for p in poses:
            f.write(" ".join(repr(float(v)) for v in p) + "\n")


def elevation_band_counts(cloud: PointCloud, center, edges) -> np.ndarray:
    """Number of points per elevation band as seen from ``center``."""
    rel = cloud.positions - np.asarray(center, dtype=np.float64)
    psi = np.arcsin(np.clip(rel[:, 2] / np.linalg.norm(rel, axis=1), -1.0, 1.0))
    counts, _ = np.histogram(psi, bins=edges)
    return counts
