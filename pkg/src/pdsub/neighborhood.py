"""k-nearest-neighbor search and the cached k+b neighbor buffers.

The kd-tree itself is scipy's ``cKDTree`` (balanced, median split on the widest
axis). Its results are post-processed so that every query returns neighbors in
exact ``(distance, id)`` order, with distances re-measured by
:func:`pdsub.core.euclidean`; candidates that could tie at the cut are fetched by
re-querying with a larger k.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .core import euclidean
from .errors import ConfigError

DEFAULT_BUFFER_TOTAL = 14

# relative slack used to decide whether a query may have missed an equidistant point
_TIE_SLACK = 1e-9


@dataclass(frozen=True)
class Neighbor:
    id: int
    dist: float

    def __post_init__(self):
        if not self.dist >= 0:
            raise ConfigError(f"neighbor distance must be non-negative, got {self.dist}")


class KdTree:
    """Static kd-tree over ``(id, position)`` pairs."""

    def __init__(self, ids, positions):
        self.positions = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
        self.ids = np.ascontiguousarray(ids, dtype=np.uint64).reshape(-1)
        if len(self.positions) == 0:
            raise ConfigError("cannot build a kd-tree over zero points")
        if len(self.ids) != len(self.positions):
            raise ConfigError("ids and positions differ in length")
        self._tree = cKDTree(self.positions, balanced_tree=True, compact_nodes=True)

    def __len__(self) -> int:
        return len(self.ids)

    def knn_batch(self, queries, count: int, exclude=None,
                  accept: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None,
                  workers: int = 1, batch: int = 4096) -> tuple[np.ndarray, np.ndarray]:
        """Exact k-NN for many queries at once.

        Parameters
        ----------
        queries : (n, 3) array
        count : number of neighbors wanted per query
        exclude : optional (n,) array of ids to skip (typically the query's own id)
        accept : optional ``accept(rows, cand)`` returning a boolean mask over the
            ``(len(rows), kq)`` tree indices ``cand``; rejected candidates are skipped
        workers : passed through to the tree for parallel queries
        batch : number of queries processed together (bounds temporary memory)

        Returns
        -------
        idx : (n, count) int64 tree indices, -1 where fewer neighbors exist
        dist : (n, count) float64 distances, inf where padded
        """
        if count < 1:
            raise ConfigError("count must be at least 1")
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        nq = len(queries)
        if exclude is not None:
            exclude = np.asarray(exclude, dtype=np.uint64).reshape(-1)
        out_idx = np.full((nq, count), -1, dtype=np.int64)
        out_d = np.full((nq, count), np.inf)
        for start in range(0, nq, batch):
            rows = np.arange(start, min(nq, start + batch))
            self._knn_rows(queries, rows, count, exclude, accept, workers, out_idx, out_d)
        return out_idx, out_d

    def _knn_rows(self, queries, rows, count, exclude, accept, workers, out_idx, out_d):
        n = len(self.ids)
        kq = count + (1 if exclude is not None else 0)
        while rows.size:
            kq = min(kq, n)
            approx, cand = self._tree.query(queries[rows], k=np.arange(1, kq + 1), workers=workers)
            d = euclidean(queries[rows][:, None, :], self.positions[cand])
            ok = np.ones(cand.shape, dtype=bool)
            if exclude is not None:
                ok &= self.ids[cand] != exclude[rows][:, None]
            if accept is not None:
                ok &= accept(rows, cand)
            d = np.where(ok, d, np.inf)
            order = np.lexsort((self.ids[cand], d), axis=-1)
            d = np.take_along_axis(d, order, axis=1)
            cand = np.take_along_axis(cand, order, axis=1)
            take = min(count, kq)
            got_d = d[:, :take]
            got_i = np.where(np.isfinite(got_d), cand[:, :take], -1)
            if kq == n:
                done = np.ones(len(rows), dtype=bool)
            else:
                cutoff = d[:, count - 1] if kq >= count else np.full(len(rows), np.inf)
                # every point not returned is at least as far as the last approximate
                # distance; if that is clearly beyond the cut no tie can be missing
                done = approx[:, -1] > cutoff * (1.0 + _TIE_SLACK)
            r = rows[done]
            out_d[r, :take] = got_d[done]
            out_idx[r, :take] = got_i[done]
            rows = rows[~done]
            kq *= 2

    def knn(self, query, count: int, exclude: Optional[int] = None) -> list[Neighbor]:
        ex = None if exclude is None else np.array([exclude], dtype=np.uint64)
        idx, dist = self.knn_batch(np.asarray(query, dtype=np.float64).reshape(1, 3), count, ex)
        return [Neighbor(int(self.ids[i]), float(dd)) for i, dd in zip(idx[0], dist[0]) if i >= 0]


def build_kdtree(points) -> KdTree:
    """Build a tree from a :class:`PointCloud` or a sequence of ``(id, position)`` pairs."""
    if hasattr(points, "ids") and hasattr(points, "positions"):
        return KdTree(points.ids, points.positions)
    pairs = list(points)
    if not pairs:
        raise ConfigError("cannot build a kd-tree over zero points")
    ids = np.array([int(p[0]) for p in pairs], dtype=np.uint64)
    pos = np.array([p[1] for p in pairs], dtype=np.float64)
    return KdTree(ids, pos)


def knn(tree: KdTree, query, count: int, exclude: Optional[int] = None) -> list[Neighbor]:
    return tree.knn(query, count, exclude)


@dataclass
class NeighborCache:
    """Ordered buffer of up to k+b neighbors of one point.

    A point is dirty once fewer than ``min(k, len(buffer))`` entries remain valid:
    a buffer that was short from the start (sparse surroundings) keeps its partial
    sum rather than being frozen forever.
    """

    owner: int
    k: int
    ids: np.ndarray
    dists: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.uint64)
        self.dists = np.asarray(self.dists, dtype=np.float64)
        if self.valid is None:
            self.valid = np.ones(len(self.ids), dtype=bool)

    @property
    def neighbors(self) -> list[Neighbor]:
        return [Neighbor(int(i), float(d)) for i, d in zip(self.ids, self.dists)]

    @property
    def valid_count(self) -> int:
        return int(self.valid.sum())

    @property
    def dirty(self) -> bool:
        return self.valid_count < min(self.k, len(self.ids))

    def first_k_valid(self, k: Optional[int] = None) -> list[Neighbor]:
        k = self.k if k is None else k
        sel = np.flatnonzero(self.valid)[:k]
        return [Neighbor(int(self.ids[i]), float(self.dists[i])) for i in sel]

    def __len__(self) -> int:
        return len(self.ids)


def invalidate(cache: NeighborCache, removed: int) -> NeighborCache:
    """Return a copy of ``cache`` with ``removed`` marked invalid (no search)."""
    valid = cache.valid & (cache.ids != np.uint64(removed))
    return NeighborCache(cache.owner, cache.k, cache.ids, cache.dists, valid)


@dataclass
class ReverseIndex:
    """Maps a point id to the ids whose first k valid neighbors contain it."""

    entries: dict = field(default_factory=dict)

    @classmethod
    def from_caches(cls, caches: Iterable[NeighborCache]) -> "ReverseIndex":
        rev = cls()
        for cache in caches:
            rev.add(cache)
        return rev

    def add(self, cache: NeighborCache):
        for nb in cache.first_k_valid():
            self.entries.setdefault(nb.id, set()).add(cache.owner)

    def discard(self, cache: NeighborCache):
        for nb in cache.first_k_valid():
            holders = self.entries.get(nb.id)
            if holders is not None:
                holders.discard(cache.owner)
                if not holders:
                    del self.entries[nb.id]

    def merge(self, other: "ReverseIndex"):
        for pid, holders in other.entries.items():
            self.entries.setdefault(pid, set()).update(holders)

    def __getitem__(self, pid: int) -> set:
        return self.entries.get(int(pid), set())


def build_caches(pages: Sequence, k: int, b: int) -> tuple[dict, ReverseIndex]:
    """Neighbor caches for the alive points of ``pages[0]`` over all alive points of ``pages``.

    ``pages`` is a center voxel page followed by its loaded neighbors, as returned by
    :meth:`pdsub.voxel_store.VoxelStore.load_neighborhood`.
    """
    if k < 1 or b < 0:
        raise ConfigError("need k >= 1 and b >= 0")
    recs = [p.records[p.alive] for p in pages]
    center = recs[0]
    caches: dict[int, NeighborCache] = {}
    if len(center) == 0:
        return caches, ReverseIndex()
    ids = np.concatenate([r["id"] for r in recs])
    pos = np.concatenate([r["pos"] for r in recs])
    tree = KdTree(ids, pos)
    idx, dist = tree.knn_batch(center["pos"], k + b, exclude=center["id"])
    for row, pid in enumerate(center["id"]):
        sel = idx[row] >= 0
        caches[int(pid)] = NeighborCache(int(pid), k, ids[idx[row][sel]], dist[row][sel])
    return caches, ReverseIndex.from_caches(caches.values())
