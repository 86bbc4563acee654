"""Bounded max-priority queue that retains the ``capacity`` lowest-cost points.

Entries are ordered by ``(cost, id)``; the top is the largest entry, whose cost is
the removal bound w_up once the queue is full. Storage is two flat ``array``
buffers (16 bytes per entry) instead of a list of tuples, which matters when the
queue is the largest resident structure of an out-of-core run.
"""
from __future__ import annotations

from array import array
from typing import Iterable

import numpy as np

from .errors import ConfigError


class BoundedMaxQueue:
    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError("queue capacity must be at least 1")
        self.capacity = int(capacity)
        self.clear()

    def __len__(self) -> int:
        return self._n

    @property
    def full(self) -> bool:
        return self._n >= self.capacity

    def top(self) -> tuple[float, int]:
        if not self._n:
            raise IndexError("top of an empty queue")
        return self._cost[0], self._id[0]

    @property
    def w_up(self) -> float:
        return self.top()[0]

    def clear(self):
        # allocated once at full capacity; only the first _n slots are in use
        self._cost = array("d", [0.0]) * self.capacity
        self._id = array("Q", [0]) * self.capacity
        self._n = 0

    # -- heap primitives ----------------------------------------------------
    def _greater(self, i: int, j: int) -> bool:
        c, d = self._cost, self._id
        return c[i] > c[j] or (c[i] == c[j] and d[i] > d[j])

    def _sift_up(self, i: int):
        c, d = self._cost, self._id
        cost, pid = c[i], d[i]
        while i:
            parent = (i - 1) >> 1
            pc, pp = c[parent], d[parent]
            if pc > cost or (pc == cost and pp > pid):
                break
            c[i], d[i] = pc, pp
            i = parent
        c[i], d[i] = cost, pid

    def _sift_down(self, i: int):
        c, d = self._cost, self._id
        n = self._n
        cost, pid = c[i], d[i]
        while True:
            child = 2 * i + 1
            if child >= n:
                break
            right = child + 1
            if right < n and (c[right] > c[child] or (c[right] == c[child] and d[right] > d[child])):
                child = right
            cc, cp = c[child], d[child]
            if cost > cc or (cost == cc and pid > cp):
                break
            c[i], d[i] = cc, cp
            i = child
        c[i], d[i] = cost, pid

    # -- public operations --------------------------------------------------
    def push(self, cost: float, pid: int) -> bool:
        """Offer an entry; returns True if it was retained."""
        cost = float(cost)
        pid = int(pid)
        if self._n < self.capacity:
            self._cost[self._n] = cost
            self._id[self._n] = pid
            self._n += 1
            self._sift_up(self._n - 1)
            return True
        tc, tp = self._cost[0], self._id[0]
        if cost < tc or (cost == tc and pid < tp):
            self._cost[0] = cost
            self._id[0] = pid
            self._sift_down(0)
            return True
        return False

    def push_batch(self, costs, ids):
        costs = np.asarray(costs, dtype=np.float64)
        ids = np.asarray(ids, dtype=np.uint64)
        if self.full and len(costs):
            tc, tp = self.top()
            keep = (costs < tc) | ((costs == tc) & (ids < np.uint64(tp)))
            costs, ids = costs[keep], ids[keep]
        for c, p in zip(costs.tolist(), ids.tolist()):
            self.push(c, p)

    def pop(self) -> tuple[float, int]:
        top = self.top()
        self._n -= 1
        if self._n:
            self._cost[0], self._id[0] = self._cost[self._n], self._id[self._n]
            self._sift_down(0)
        return top

    def buffers(self) -> tuple[memoryview, memoryview]:
        """Zero-copy views of the cost and id storage, in heap order."""
        return memoryview(self._cost)[:self._n], memoryview(self._id)[:self._n]

    def items(self) -> tuple[np.ndarray, np.ndarray]:
        """Entries sorted ascending by ``(cost, id)``."""
        c = np.frombuffer(self._cost, dtype=np.float64)[:self._n].copy()
        d = np.frombuffer(self._id, dtype=np.uint64)[:self._n].copy()
        order = np.lexsort((d, c))
        return c[order], d[order]

    @classmethod
    def from_items(cls, capacity: int, costs: Iterable[float], ids: Iterable[int]) -> "BoundedMaxQueue":
        q = cls(capacity)
        q.push_batch(np.asarray(list(costs), dtype=np.float64), np.asarray(list(ids), dtype=np.uint64))
        return q
