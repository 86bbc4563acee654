"""In-core reference subsamplers used to judge decimation quality.

* :func:`yuksel_eliminate` weighted sample elimination over fixed-radius
  neighborhoods, removing the highest-cost sample one at a time.
* :func:`dart_throwing` greedy Poisson-disk selection whose radius is bisected
  until the selection is just above the target, then trimmed at random.
* :func:`random_purge` the same greedy selection at a caller-given radius with no
  count control.

All three are in-core by design; they load the whole cloud and a neighbor graph.
"""
from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .core import PointCloud, euclidean
from .cost import yuksel_radius, yuksel_rmin, yuksel_weight
from .decimator import target_count
from .errors import ConfigError, DataError, MemoryBudgetError

log = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 0.02
MAX_BISECTION_STEPS = 64
# fraction of the plane covered by disks of radius r/2 around Poisson-disk samples
DEFAULT_PACKING = 0.7


@dataclass
class BaselineResult:
    surviving_ids: set
    achieved_count: int
    parameters: dict = field(default_factory=dict)
    # ids in removal order, only filled when a trace was requested
    trace: Optional[list] = None

    def select(self, cloud: PointCloud) -> PointCloud:
        return cloud.select_ids(np.fromiter(sorted(self.surviving_ids), dtype=np.uint64,
                                            count=len(self.surviving_ids)))


def _check_lambda(lam: float) -> None:
    if not 0.0 < lam < 1.0:
        raise ConfigError(f"lambda must lie in (0, 1), got {lam}")


def close_pairs(positions: np.ndarray, radius: float, tree: Optional[cKDTree] = None):
    """Index pairs ``(i, j)``, ``i < j``, at distance strictly below ``radius``, with distances."""
    if radius <= 0 or len(positions) < 2:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, np.zeros(0)
    tree = cKDTree(positions) if tree is None else tree
    pairs = tree.query_pairs(radius, output_type="ndarray")
    if len(pairs) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, np.zeros(0)
    i = pairs[:, 0].astype(np.int64)
    j = pairs[:, 1].astype(np.int64)
    d = euclidean(positions[i], positions[j])
    keep = d < radius
    return i[keep], j[keep], d[keep]


def greedy_disk_sample(positions: np.ndarray, radius: float, order: np.ndarray,
                       tree: Optional[cKDTree] = None) -> np.ndarray:
    """Rows accepted by visiting ``order`` and keeping a point iff every kept point is ``>= radius`` away.

    The sequential pass is evaluated in parallel rounds: an undecided point whose
    visit rank beats all its undecided conflicting neighbors is certainly kept, and
    its neighbors are then certainly dropped. This yields the same set.
    """
    n = len(positions)
    order = np.asarray(order, dtype=np.int64)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if radius > 0 and n > 1:
        lo, hi = positions.min(axis=0), positions.max(axis=0)
        if float(np.linalg.norm(hi - lo)) < radius:
            return order[:1].copy()
    i, j, _ = close_pairs(positions, radius, tree)
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    kept = np.zeros(n, dtype=bool)
    undecided = np.ones(n, dtype=bool)
    sentinel = np.iinfo(np.int64).max
    while True:
        live = undecided[i] & undecided[j]
        i, j = i[live], j[live]
        best = np.full(n, sentinel, dtype=np.int64)
        np.minimum.at(best, i, rank[j])
        np.minimum.at(best, j, rank[i])
        win = undecided & (rank < best)
        kept |= win
        undecided &= ~win
        if not undecided.any():
            break
        lose = np.zeros(n, dtype=bool)
        lose[j[win[i]]] = True
        lose[i[win[j]]] = True
        undecided &= ~lose
        if not undecided.any():
            break
    rows = np.flatnonzero(kept)
    return rows[np.argsort(rank[rows], kind="stable")]


def corsini_radius(area: float, target: int, packing: float = DEFAULT_PACKING) -> float:
    """Disk radius expected to leave about ``target`` samples on a surface of ``area``."""
    if not area > 0 or target <= 0:
        raise ConfigError("area and target must be positive")
    return math.sqrt(area / (packing * math.pi * target))


def random_purge(cloud: PointCloud, radius: float, seed: int = 0) -> BaselineResult:
    if not radius > 0:
        raise ConfigError("radius must be positive")
    order = np.random.default_rng(seed).permutation(len(cloud))
    rows = greedy_disk_sample(cloud.positions, radius, order)
    ids = set(int(v) for v in cloud.ids[rows])
    return BaselineResult(ids, len(ids), {"method": "random_purge", "radius": radius, "seed": seed})


def _initial_radius(positions: np.ndarray, lam: float, tree: cKDTree, rng) -> float:
    # distance to roughly the 1/lam-th neighbor: each kept sample stands for 1/lam inputs
    k = min(len(positions), int(math.ceil(1.0 / lam)) + 1)
    rows = rng.choice(len(positions), size=min(len(positions), 1000), replace=False)
    d, _ = tree.query(positions[rows], k=k)
    d = np.atleast_2d(d)[:, -1]
    r = float(np.median(d[np.isfinite(d)])) if np.isfinite(d).any() else 0.0
    return r if r > 0 else 1e-9


def dart_throwing(cloud: PointCloud, lam: float, seed: int = 0, tolerance: float = DEFAULT_TOLERANCE,
                  max_steps: int = MAX_BISECTION_STEPS) -> BaselineResult:
    """Bisect the Poisson-disk radius until ``target <= count <= target (1 + tolerance)``."""
    _check_lambda(lam)
    if tolerance < 0:
        raise ConfigError("tolerance must be non-negative")
    n = len(cloud)
    target = target_count(lam, n)
    if target < 1:
        raise ConfigError(f"lambda {lam} leaves no points of {n}")
    pos = cloud.positions
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    tree = cKDTree(pos)
    upper = math.floor(target * (1.0 + tolerance))

    def run(radius):
        return greedy_disk_sample(pos, radius, order, tree)

    lo, lo_rows = 0.0, order.copy()
    hi = _initial_radius(pos, lam, tree, rng)
    diag = float(np.linalg.norm(pos.max(axis=0) - pos.min(axis=0)))
    steps = 0
    # grow hi until it selects fewer than target
    while True:
        rows = run(hi)
        steps += 1
        if len(rows) < target:
            break
        lo, lo_rows = hi, rows
        if len(rows) <= upper:
            break
        if hi > diag or steps >= max_steps:
            raise DataError("dart throwing could not bracket the target count")
        hi *= 2.0
    while len(lo_rows) > upper:
        if steps >= max_steps:
            raise DataError(f"dart throwing bisection did not converge in {max_steps} steps "
                            f"(degenerate cloud?)")
        mid = 0.5 * (lo + hi)
        rows = run(mid)
        steps += 1
        if len(rows) >= target:
            lo, lo_rows = mid, rows
        else:
            hi = mid
    accepted = len(lo_rows)
    if accepted > target:
        lo_rows = rng.choice(lo_rows, size=target, replace=False)
    ids = set(int(v) for v in cloud.ids[lo_rows])
    log.info("dart throwing: radius %.6g accepted %d trimmed to %d in %d steps", lo, accepted, target, steps)
    return BaselineResult(ids, len(ids), {"method": "dart_throwing", "radius": lo, "seed": seed,
                                          "tolerance": tolerance, "accepted": accepted, "steps": steps})


def _estimated_bytes(n: int, pairs: int) -> int:
    # positions, costs, alive flags and heap entries per point; two directed edges per pair
    return n * (24 + 8 + 1 + 48) + pairs * 2 * (8 + 8)


def yuksel_eliminate(cloud: PointCloud, lam: float, alpha: float = 8.0, beta: float = 0.65,
                     gamma: float = 1.5, *, memory_budget: Optional[int] = None,
                     trace: bool = False) -> BaselineResult:
    """Weighted sample elimination down to ``floor(lam n)`` samples.

    The elimination radius comes from the bounding-box volume and the target count.
    Each removal subtracts the removed sample's weight from its neighbors' costs; the
    max-heap is lazy, so stale entries are skipped on pop. Ties go to the larger id.
    """
    _check_lambda(lam)
    n = len(cloud)
    target = target_count(lam, n)
    if target < 1:
        raise ConfigError(f"lambda {lam} leaves no points of {n}")
    if memory_budget is not None and _estimated_bytes(n, 0) > memory_budget:
        raise MemoryBudgetError(f"cloud of {n} points does not fit a {memory_budget}-byte budget")
    volume = cloud.bounds.volume()
    r = yuksel_radius(volume, target)
    r_min = yuksel_rmin(r, lam, gamma, beta)
    pos = cloud.positions
    i, j, d = close_pairs(pos, r)
    if memory_budget is not None and _estimated_bytes(n, len(i)) > memory_budget:
        raise MemoryBudgetError(f"{len(i)} neighbor pairs exceed the {memory_budget}-byte budget")
    w = yuksel_weight(d, r, r_min, alpha)
    cost = np.zeros(n)
    np.add.at(cost, i, w)
    np.add.at(cost, j, w)
    # symmetric adjacency in CSR form
    src = np.concatenate([i, j])
    dst = np.concatenate([j, i])
    ww = np.concatenate([w, w])
    perm = np.argsort(src, kind="stable")
    dst, ww = dst[perm], ww[perm]
    start = np.searchsorted(src[perm], np.arange(n + 1))

    ids = cloud.ids.astype(np.int64)
    alive = np.ones(n, dtype=bool)
    heap = [(-float(c), -int(pid), row) for row, (c, pid) in enumerate(zip(cost, ids))]
    heapq.heapify(heap)
    removed = [] if trace else None
    left = n
    while left > target:
        c, _, row = heapq.heappop(heap)
        if not alive[row] or -c != cost[row]:
            continue
        alive[row] = False
        left -= 1
        if trace:
            removed.append(int(ids[row]))
        nb = dst[start[row]:start[row + 1]]
        sel = alive[nb]
        nb = nb[sel]
        cost[nb] -= ww[start[row]:start[row + 1]][sel]
        for q in nb.tolist():
            heapq.heappush(heap, (-float(cost[q]), -int(ids[q]), q))
    surviving = set(int(v) for v in ids[alive])
    params = {"method": "yuksel", "lambda": lam, "alpha": alpha, "beta": beta, "gamma": gamma,
              "radius": r, "r_min": r_min, "volume": volume}
    return BaselineResult(surviving, len(surviving), params, removed)
