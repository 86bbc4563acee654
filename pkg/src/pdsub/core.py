"""Point records, point clouds and the few geometric primitives shared by all modules.

Clouds are stored column-wise (one numpy array per attribute) so that millions of
points stay compact; :class:`PointRecord` is the per-point view used at API edges.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError

NORMAL_TOLERANCE = 1e-4
_TINY = np.finfo(np.float64).tiny


def euclidean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance between broadcastable arrays of 3-vectors.

    Summation order is fixed (x, then y, then z) so scalar and vectorized callers
    agree bit for bit; kd-tree results are re-measured with this function.
    """
    dx = a[..., 0] - b[..., 0]
    dy = a[..., 1] - b[..., 1]
    dz = a[..., 2] - b[..., 2]
    with np.errstate(over="ignore", under="ignore"):
        sq = dx * dx + dy * dy + dz * dz
    # squares of tiny or huge offsets under/overflow; rescale only those entries
    bad = (sq < _TINY) | np.isinf(sq)
    if not np.any(bad):
        return np.sqrt(sq)
    dx, dy, dz, sq = np.broadcast_arrays(dx, dy, dz, sq)
    out = np.sqrt(sq)
    bad = np.broadcast_to(bad, out.shape)
    m = np.maximum(np.maximum(np.abs(dx[bad]), np.abs(dy[bad])), np.abs(dz[bad]))
    with np.errstate(invalid="ignore", divide="ignore"):
        x, y, z = dx[bad] / m, dy[bad] / m, dz[bad] / m
        fixed = m * np.sqrt(x * x + y * y + z * z)
    out = np.array(out, dtype=np.float64)
    out[bad] = np.where(m == 0, 0.0, fixed)
    return out


@dataclass(frozen=True)
class PointRecord:
    id: int
    position: tuple[float, float, float]
    normal: Optional[tuple[float, float, float]] = None
    color: Optional[tuple[int, int, int]] = None

    def __post_init__(self):
        if self.id < 0 or self.id >= 2**64:
            raise ConfigError(f"point id {self.id} is not a 64-bit unsigned value")
        pos = tuple(float(v) for v in self.position)
        if len(pos) != 3 or not all(math.isfinite(v) for v in pos):
            raise ConfigError(f"point {self.id}: position must be 3 finite reals, got {self.position}")
        object.__setattr__(self, "position", pos)
        if self.normal is not None:
            n = tuple(float(np.float32(v)) for v in self.normal)
            norm = math.sqrt(sum(v * v for v in n))
            if len(n) != 3 or abs(norm - 1.0) > NORMAL_TOLERANCE:
                raise ConfigError(f"point {self.id}: normal is not unit length ({norm})")
            object.__setattr__(self, "normal", n)
        if self.color is not None:
            c = tuple(int(v) for v in self.color)
            if len(c) != 3 or not all(0 <= v <= 255 for v in c):
                raise ConfigError(f"point {self.id}: color channels must be 0..255")
            object.__setattr__(self, "color", c)


@dataclass(frozen=True)
class Aabb:
    min: tuple[float, float, float]
    max: tuple[float, float, float]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.min)
        hi = tuple(float(v) for v in self.max)
        if any(a > b for a, b in zip(lo, hi)):
            raise ConfigError(f"invalid box: min {lo} exceeds max {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @classmethod
    def from_points(cls, positions: np.ndarray) -> "Aabb":
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        if len(positions) == 0:
            return cls((0.0, 0.0, 0.0), (0.0, 0.0, 0.0))
        return cls(tuple(positions.min(axis=0)), tuple(positions.max(axis=0)))

    @property
    def extent(self) -> np.ndarray:
        return np.subtract(self.max, self.min)

    def volume(self) -> float:
        e = self.extent
        return float(e[0] * e[1] * e[2])

    def diagonal(self) -> float:
        return float(np.sqrt(np.sum(self.extent**2)))

    def contains(self, positions: np.ndarray) -> np.ndarray:
        p = np.asarray(positions, dtype=np.float64)
        return np.all((p >= self.min) & (p <= self.max), axis=-1)


@dataclass
class PointCloud:
    """Column-wise point cloud.

    ``ids`` must be strictly increasing; normals and colors are optional and,
    when present, cover every point.
    """

    ids: np.ndarray
    positions: np.ndarray
    normals: Optional[np.ndarray] = None
    colors: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.ids = np.ascontiguousarray(self.ids, dtype=np.uint64).reshape(-1)
        if len(self.ids) != n:
            raise ConfigError(f"{len(self.ids)} ids for {n} positions")
        if n and not np.all(np.isfinite(self.positions)):
            raise ConfigError("positions must be finite")
        if n > 1 and not np.all(self.ids[1:] > self.ids[:-1]):
            raise ConfigError("point ids must be strictly increasing in storage order")
        if self.normals is not None:
            self.normals = np.ascontiguousarray(self.normals, dtype=np.float32).reshape(-1, 3)
            if len(self.normals) != n:
                raise ConfigError("normals do not cover every point")
            norms = np.linalg.norm(self.normals.astype(np.float64), axis=1)
            if n and np.max(np.abs(norms - 1.0)) > NORMAL_TOLERANCE:
                raise ConfigError("normals must be unit length")
        if self.colors is not None:
            self.colors = np.ascontiguousarray(self.colors, dtype=np.uint8).reshape(-1, 3)
            if len(self.colors) != n:
                raise ConfigError("colors do not cover every point")
        for name, values in self.extra.items():
            if len(values) != n:
                raise ConfigError(f"extra property {name!r} does not cover every point")

    @classmethod
    def from_positions(cls, positions, ids=None, normals=None, colors=None) -> "PointCloud":
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        if ids is None:
            ids = np.arange(len(positions), dtype=np.uint64)
        return cls(ids, positions, normals, colors)

    @classmethod
    def from_records(cls, records: Iterable[PointRecord]) -> "PointCloud":
        records = sorted(records, key=lambda r: r.id)
        if not records:
            return cls(np.zeros(0, np.uint64), np.zeros((0, 3)))
        has_n = records[0].normal is not None
        has_c = records[0].color is not None
        if any((r.normal is not None) != has_n or (r.color is not None) != has_c for r in records):
            raise ConfigError("records disagree on which optional attributes are present")
        return cls(
            np.array([r.id for r in records], dtype=np.uint64),
            np.array([r.position for r in records], dtype=np.float64),
            np.array([r.normal for r in records], dtype=np.float32) if has_n else None,
            np.array([r.color for r in records], dtype=np.uint8) if has_c else None,
        )

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> PointRecord:
        return PointRecord(
            int(self.ids[i]),
            tuple(self.positions[i]),
            None if self.normals is None else tuple(self.normals[i]),
            None if self.colors is None else tuple(int(c) for c in self.colors[i]),
        )

    def __iter__(self) -> Iterator[PointRecord]:
        for i in range(len(self)):
            yield self[i]

    @property
    def bounds(self) -> Aabb:
        return Aabb.from_points(self.positions)

    def nbytes(self) -> int:
        """Packed in-memory size of the point attributes (ids, positions, normals, colors)."""
        total = self.ids.nbytes + self.positions.nbytes
        if self.normals is not None:
            total += self.normals.nbytes
        if self.colors is not None:
            total += self.colors.nbytes
        return total

    def subset(self, mask_or_index) -> "PointCloud":
        sel = np.asarray(mask_or_index)
        if sel.dtype != bool:
            sel = np.sort(sel)
        return PointCloud(
            self.ids[sel],
            self.positions[sel],
            None if self.normals is None else self.normals[sel],
            None if self.colors is None else self.colors[sel],
            {name: np.asarray(v)[sel] for name, v in self.extra.items()},
        )

    def select_ids(self, ids: Iterable[int]) -> "PointCloud":
        wanted = np.fromiter((int(i) for i in ids), dtype=np.uint64)
        return self.subset(np.isin(self.ids, wanted))

    @staticmethod
    def concatenate(clouds: Sequence["PointCloud"], renumber: bool = True) -> "PointCloud":
        clouds = [c for c in clouds]
        if not clouds:
            return PointCloud(np.zeros(0, np.uint64), np.zeros((0, 3)))
        positions = np.concatenate([c.positions for c in clouds])
        normals = None
        if all(c.normals is not None for c in clouds):
            normals = np.concatenate([c.normals for c in clouds])
        colors = None
        if all(c.colors is not None for c in clouds):
            colors = np.concatenate([c.colors for c in clouds])
        if renumber:
            ids = np.arange(len(positions), dtype=np.uint64)
        else:
            ids = np.concatenate([c.ids for c in clouds])
        return PointCloud(ids, positions, normals, colors)


def distance(a: PointRecord, b: PointRecord) -> float:
    return float(euclidean(np.asarray(a.position), np.asarray(b.position)))


def min_pairwise_distance(cloud) -> float:
    """Smallest distance between any two points of ``cloud``.

    Accepts a :class:`PointCloud` or an ``(n, 3)`` array.
    """
    positions = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    positions = positions.reshape(-1, 3)
    if len(positions) < 2:
        raise ConfigError("insufficient points: need at least 2")
    tree = cKDTree(positions)
    k = min(4, len(positions))
    _, idx = tree.query(positions, k=k)
    # a few extra candidates so ulp-level disagreement between the tree's metric and
    # ``euclidean`` cannot change the answer
    d = euclidean(positions[:, None, :], positions[idx])
    d[idx == np.arange(len(positions))[:, None]] = np.inf
    return float(np.min(d))
