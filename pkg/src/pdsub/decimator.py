"""Out-of-core greedy Poisson-disk decimation over a :class:`VoxelStore`.

Each iteration has two passes.

Pass A (cost update)
    Voxels are visited in chunks. For every point of a chunk, the k+b nearest
    neighbors are searched among the points of its own and the 26 adjacent voxels;
    each point caches its position, the rows of those neighbors in the iteration's
    state layout and the resulting cost. Costs feed a bounded queue holding the
    ``target`` lowest costs, whose maximum becomes the removal bound ``w_up``.
    With a memory budget the states live in one chunk-major file under
    ``<store>/work`` and each chunk is loaded with its one-voxel halo.

Pass B (removal)
    Candidates are alive, non-dirty points with cost strictly above ``w_up``. Work
    proceeds in snapshot rounds: a candidate is removed in a round when it outranks,
    by ``(cost, id)``, every candidate linked to it through the first k valid entries
    of either buffer. Later entries cannot change a cost or the dirty test, so they
    never couple two removals. Removals invalidate the corresponding buffer entries
    of surviving points, whose costs are recomputed from the cached positions of the
remaining neighbors (bit-identical to the Pass A values); a point whose
    valid buffer drops below ``min(k, buffer length)`` turns dirty and waits for the
    next Pass A.
    The outcome equals removing candidates one at a time in descending
    ``(cost, id)`` order, and does not depend on how voxels are grouped into chunks.

If a Pass B removes nothing (all remaining costs tie at ``w_up``), the single
highest ``(cost, id)`` non-dirty point is removed so that every iteration makes
progress. Removals are committed to the store at the end of each iteration and a
checkpoint is written.
"""
from __future__ import annotations

import json
import logging
import math
import os
import shutil
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from typing import Optional

import numpy as np

from .core import euclidean
from .cost import (CostConfig, CostKind, color_weight, inverse_square, normal_weight, sum_first_k,
                   yuksel_radius, yuksel_rmin, yuksel_weight)
from .errors import ConfigError, DataError, InvariantViolation, MemoryBudgetError
from .neighborhood import DEFAULT_BUFFER_TOTAL, KdTree
from .queue import BoundedMaxQueue
from .voxel_store import NEIGHBOR_OFFSETS, VoxelStore, pack_keys, unpack_keys

log = logging.getLogger(__name__)

CHECKPOINT = "checkpoint.bin"
AUDIT_LOG = "audit.log"
WORK_DIR = "work"
STATE_FILE = "states.bin"
_QUERY_BATCH = 2048
_SLACK = 0.2
_BINS = 256
_HALO_BATCH = 64
_U64_MAX = 2**64 - 1
_SIGN = np.uint64(1 << 63)


def cost_key(cost: np.ndarray) -> np.ndarray:
    """Map float64 values to uint64 keys with the same ordering."""
    bits = np.ascontiguousarray(cost, dtype=np.float64).view(np.uint64)
    return np.where(bits & _SIGN, ~bits, bits | _SIGN)


def key_cost(key: np.ndarray) -> np.ndarray:
    key = np.asarray(key, dtype=np.uint64)
    return np.where(key & _SIGN, key ^ _SIGN, ~key).view(np.float64)


class CheckpointError(DataError):
    pass


def target_count(lam: float, n: int) -> int:
    """``floor(lam * n)`` evaluated on the decimal value of ``lam`` (0.29 * 100 -> 29)."""
    if not (0.0 < lam < 1.0):
        raise ConfigError(f"lambda must lie strictly between 0 and 1, got {lam}")
    return math.floor(Fraction(repr(float(lam))) * n)


def state_dtype(m: int, row: str = "<i4", feature: Optional[tuple] = None) -> np.dtype:
    """Per-point cache: cost, position, the global rows of the ``m`` buffered
    neighbors (-1 once invalid) and, for attribute-weighted costs, the attribute.

    ``feature`` is a ``(name, dtype)`` pair such as ``("normal", "<f4")``.
    """
    fields = [("id", "<u8"), ("cost", "<f8"), ("pos", "<f8", (3,))]
    if feature is not None:
        fields.append((feature[0], feature[1], (3,)))
    fields += [("nbr", row, (m,)), ("blen", "u1"), ("alive", "u1"), ("dirty", "u1"), ("mark", "<u4")]
    return np.dtype(fields)


def rank_select(batches, rank: int, limit: int = 4096) -> tuple[int, int]:
    """The ``rank``-th largest ``(key, id)`` pair (1 = largest) over uint64 arrays.

    ``batches()`` must return a fresh iterator of ``(keys, ids)`` array pairs each
    time it is called. A window of keys is narrowed over repeated passes, first on
    the key and, when one key value holds too many pairs, on the id, so no more
    than ``limit`` pairs are held at once whatever the total count.
    """
    need = int(rank)
    lo, hi = 0, _U64_MAX
    fixed = None  # the answer's key once it is known
    while True:
        n = 0
        keys, ids = [], []
        for kc, pid in batches():
            if fixed is not None:
                same = kc == fixed
                kc, pid = kc[same], pid[same]
            v = kc if fixed is None else pid
            inside = (v >= np.uint64(lo)) & (v <= np.uint64(hi))
            n += int(np.count_nonzero(inside))
            if n <= limit:
                keys.append(kc[inside])
                ids.append(pid[inside])
        if not 1 <= need <= n:
            raise InvariantViolation(f"rank {rank} is out of range")
        if n <= limit:
            keys, ids = np.concatenate(keys), np.concatenate(ids)
            j = np.lexsort((ids, keys))[len(keys) - need]
            return int(keys[j]), int(ids[j])
        if lo == hi:
            # the window holds a single key value; rank the ids inside it
            fixed, lo, hi = np.uint64(lo), 0, _U64_MAX
            continue
        width = hi - lo + 1
        lows = np.unique(np.array([lo + width * j // _BINS for j in range(_BINS)], dtype=np.uint64))
        counts = np.zeros(len(lows), dtype=np.int64)
        for kc, pid in batches():
            v = kc if fixed is None else pid[kc == fixed]
            v = v[(v >= np.uint64(lo)) & (v <= np.uint64(hi))]
            counts += np.bincount(np.searchsorted(lows, v, side="right") - 1, minlength=len(lows))
        for j in range(len(lows) - 1, -1, -1):
            if need <= counts[j]:
                lo, hi = int(lows[j]), (int(lows[j + 1]) - 1 if j + 1 < len(lows) else hi)
                break
            need -= int(counts[j])


@dataclass
class DecimationReport:
    iterations: int = 0
    removed_per_iteration: list = field(default_factory=list)
    final_count: int = 0
    wall_time_per_iteration: list = field(default_factory=list)
    rounds_per_iteration: list = field(default_factory=list)
    forced_removals: int = 0
    original_count: int = 0
    target: int = 0
    seed: int = 0
    chunks: int = 1

    def to_text(self, timings: bool = True) -> str:
        """``key: value`` lines; ``timings=False`` leaves out wall-clock times so that
        reruns produce identical text."""
        lines = []
        for key, value in asdict(self).items():
            if key == "wall_time_per_iteration" and not timings:
                continue
            if isinstance(value, list):
                value = " ".join(f"{v:.6f}" if isinstance(v, float) else str(v) for v in value)
            lines.append(f"{key}: {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "DecimationReport":
        return cls(**data)


@dataclass
class _Params:
    lam: float
    cost: CostConfig
    k: int
    b: int
    seed: int
    memory_budget: Optional[int]
    workers: int
    audit: bool

    @property
    def m(self) -> int:
        return self.k + self.b

    def to_dict(self) -> dict:
        c = self.cost
        return {
            "lam": self.lam, "k": self.k, "b": self.b, "seed": self.seed,
            "memory_budget": self.memory_budget, "workers": self.workers, "audit": self.audit,
            "cost": {"kind": c.kind.value, "k": c.k, "epsilon_d": c.epsilon_d, "sigma_c": c.sigma_c,
                     "alpha": c.yuksel.alpha, "beta": c.yuksel.beta, "gamma": c.yuksel.gamma},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "_Params":
        c = d["cost"]
        from .cost import YukselParams

        cost = CostConfig(c["kind"], c["k"], c["epsilon_d"], c["sigma_c"],
                          YukselParams(c["alpha"], c["beta"], c["gamma"], d["lam"]))
        return cls(d["lam"], cost, d["k"], d["b"], d["seed"], d["memory_budget"], d["workers"], d["audit"])


def _key_extent(packed: np.ndarray, batch: int = 4096) -> int:
    lo = np.full(3, np.iinfo(np.int64).max)
    hi = np.full(3, np.iinfo(np.int64).min)
    for s in range(0, len(packed), batch):
        keys = unpack_keys(packed[s:s + batch])
        lo = np.minimum(lo, keys.min(axis=0))
        hi = np.maximum(hi, keys.max(axis=0))
    return int((hi - lo).max()) + 1


def _home_blocks(packed: np.ndarray, block: int, batch: int = 4096) -> np.ndarray:
    """Packed key of the ``block^3`` block holding each voxel."""
    if block == 1:
        return np.asarray(packed, dtype=np.int64)
    out = np.empty(len(packed), dtype=np.int64)
    for s in range(0, len(packed), batch):
        out[s:s + batch] = pack_keys(np.floor_divide(unpack_keys(packed[s:s + batch]), block))
    return out


class _WorkingSet:
    """States of a chunk (rows ``[0, n_center)``) followed by those of its one-voxel halo.

    Cached neighbors are global rows of the iteration's state layout; :meth:`local`
    maps them to rows of this working set (-1 when invalid or outside it).
    """

    def __init__(self, ci: int, S: np.ndarray, runs: np.ndarray, n_center: int,
                 center_vox: np.ndarray, center_counts: np.ndarray, halo: np.ndarray):
        self.ci = ci
        self.S = S
        # (global start, local start, length) per contiguous run, sorted by global start
        self.runs = runs
        self.n_center = n_center
        self.center_vox = center_vox
        self.center_counts = center_counts
        self.halo = halo
        self.identity = len(runs) == 1 and runs[0, 0] == 0 and n_center == len(S)

    def local(self, g: np.ndarray) -> np.ndarray:
        if self.identity:
            return g
        gs, ls, ln = self.runs[:, 0], self.runs[:, 1], self.runs[:, 2]
        r = np.searchsorted(gs, g, side="right") - 1
        np.maximum(r, 0, out=r)
        off = g - gs[r]
        ok = (g >= 0) & (off >= 0) & (off < ln[r])
        return np.where(ok, ls[r] + off, -1)

    @property
    def segments(self) -> np.ndarray:
        """First center row of every center voxel."""
        return np.concatenate([[0], np.cumsum(self.center_counts)[:-1]])

    def center_point_vox(self, rows: np.ndarray) -> np.ndarray:
        ends = np.cumsum(self.center_counts)
        return self.center_vox[np.searchsorted(ends, rows, side="right")]


class _Run:
    def __init__(self, store: VoxelStore, params: _Params, report: DecimationReport):
        self.store = store
        self.p = params
        self.report = report
        self.keff = params.cost.effective_k
        total = store.manifest.total_points
        self.feature = {CostKind.KNN_NORMAL: ("normal", "<f4"),
                        CostKind.KNN_COLOR: ("color", "u1")}.get(params.cost.kind)
        self.dtype = state_dtype(params.m, "<i4" if total < 2**31 else "<i8", self.feature)
        self.workdir = os.path.join(store.directory, WORK_DIR)
        self._audit = None
        self._fh = None
        self._resident = None
        m = store.manifest
        if params.cost.kind is CostKind.KNN_NORMAL and not m.normals:
            raise ConfigError("normal-weighted cost needs a cloud with normals")
        if params.cost.kind is CostKind.KNN_COLOR and not m.colors:
            raise ConfigError("color-weighted cost needs a cloud with colors")
        self.yuksel_r = self.yuksel_rmin = None
        if params.cost.kind is CostKind.YUKSEL:
            y = params.cost.yuksel
            self.yuksel_r = yuksel_radius(m.bounds.volume(), report.target)
            self.yuksel_rmin = yuksel_rmin(self.yuksel_r, params.lam, y.gamma, y.beta)

    # -- chunk planning -----------------------------------------------------
    def _bytes_per_point(self) -> int:
        # cached state, plus during Pass A the record columns, voxel index and tree order
        return self.dtype.itemsize + self.store.dtype.itemsize + 16

    def plan_chunks(self):
        man = self.store.manifest
        nv = len(man)
        budget = self.p.memory_budget
        m = self.p.m
        if budget is None or nv <= 1:
            order = np.arange(nv)
            ptr = np.array([0, nv])
            self.query_batch, self.row_batch = _QUERY_BATCH, 1 << 16
            self.select_limit = 1 << 20
        else:
            # a fifth is left to interpreter and allocator overhead; then come the
            # queue entries and the per-voxel bookkeeping arrays
            ws_budget = int(budget * (1 - _SLACK)) - 16 * self.report.target - 32 * nv
            # a quarter goes to per-batch temporaries of searches and sweeps
            reserve = max(ws_budget // 4, 0)
            ws_budget -= reserve
            self.query_batch = int(max(8, reserve // (320 * m)))
            self.row_batch = int(max(16, reserve // (160 * m)))
            self.select_limit = int(max(64, reserve // 64))
            per_point = self._bytes_per_point()
            packed, counts = man.packed, man.counts
            block = 1
            if ws_budget > 0:
                size = 1 << int(math.ceil(math.log2(max(_key_extent(packed), 2))))
                while size > 1:
                    if self._max_block_load(packed, counts, size) * per_point <= ws_budget:
                        block = size
                        break
                    size //= 2
            if block == 1 and self._max_block_load(packed, counts, 1) * per_point > ws_budget:
                log.warning("memory budget %d bytes is below the working set of the densest 27-voxel "
                            "neighborhood; consider a smaller voxel size", budget)
            home = _home_blocks(packed, block)
            order = np.argsort(home, kind="stable")
            hs = home[order]
            ptr = np.concatenate([[0], np.flatnonzero(hs[1:] != hs[:-1]) + 1, [nv]])
            log.info("%d chunk(s) of up to %d^3 voxels", len(ptr) - 1, block)
        # voxels of chunk c are order[ptr[c]:ptr[c + 1]], ascending manifest index
        self.order, self.ptr = order.astype(np.int32), ptr
        self.n_chunks = len(ptr) - 1
        self.resident = self.n_chunks == 1
        # chunk-major state layout: every chunk's own rows are one contiguous run
        counts = man.counts
        self.chunk_of = np.empty(nv, dtype=np.int32)
        self.chunk_of[order] = np.repeat(np.arange(self.n_chunks, dtype=np.int32), np.diff(ptr))
        c = counts[order]
        row_t = self.dtype["nbr"].base
        self.vstart = np.empty(nv, dtype=row_t)
        self.vstart[order] = np.cumsum(c) - c
        self.cstart = np.concatenate([[0], np.cumsum(c)])[ptr].astype(row_t)

    def chunk(self, ci: int) -> np.ndarray:
        return self.order[self.ptr[ci]:self.ptr[ci + 1]]

    @staticmethod
    def _max_block_load(packed, counts, block, batch: int = 256) -> int:
        """Largest point count of any block of ``block^3`` voxels plus its one-voxel halo."""
        homes = np.unique(_home_blocks(packed, block))
        sums = np.zeros(len(homes), dtype=np.int64)
        for s in range(0, len(packed), batch):
            keys = unpack_keys(packed[s:s + batch])
            # the distinct blocks whose halo-extended region holds each voxel
            cand = np.sort(pack_keys(np.floor_divide(keys[:, None, :] + NEIGHBOR_OFFSETS, block)
                                     .reshape(-1, 3)).reshape(len(keys), 27), axis=1)
            first = np.ones(cand.shape, dtype=bool)
            first[:, 1:] = cand[:, 1:] != cand[:, :-1]
            pos = np.minimum(np.searchsorted(homes, cand), len(homes) - 1)
            hit = first & (homes[pos] == cand)
            w = np.broadcast_to(counts[s:s + batch, None], cand.shape)
            np.add.at(sums, pos[hit], w[hit])
        return int(sums.max()) if len(sums) else 0

    # -- state storage ------------------------------------------------------
    def _halo(self, chunk: np.ndarray) -> np.ndarray:
        if self.resident:
            return np.zeros(0, np.int64)
        man = self.store.manifest
        own = self.chunk_of[chunk[0]]
        parts = []
        # batched: the 27-neighbor lookup needs about 650 bytes per voxel
        for s in range(0, len(chunk), _HALO_BATCH):
            nbr = man.neighbor_indices(chunk[s:s + _HALO_BATCH]).ravel()
            nbr = np.unique(nbr[nbr >= 0])
            parts.append(nbr[self.chunk_of[nbr] != own])
        return np.unique(np.concatenate(parts)) if parts else np.zeros(0, np.int64)

    def _read(self, buf: np.ndarray, row: int):
        view = memoryview(buf.view(np.uint8))
        self._fh.seek(row * self.dtype.itemsize)
        if self._fh.readinto(view) != len(view):
            raise InvariantViolation("state file is truncated")

    def _write(self, buf: np.ndarray, row: int):
        self._fh.seek(row * self.dtype.itemsize)
        self._fh.write(memoryview(buf.view(np.uint8)))

    def read_center(self, ci: int) -> np.ndarray:
        if self.resident:
            return self._resident.S
        S = np.empty(int(self.cstart[ci + 1] - self.cstart[ci]), dtype=self.dtype)
        self._read(S, int(self.cstart[ci]))
        return S

    def load(self, ci: int) -> _WorkingSet:
        if self.resident:
            return self._resident
        man = self.store.manifest
        chunk = self.chunk(ci)
        halo = self._halo(chunk)
        n_center = int(self.cstart[ci + 1] - self.cstart[ci])
        hs = self.vstart[halo]
        o = np.argsort(hs)
        hs, hl = hs[o], man.counts[halo[o]]
        runs = np.array([[self.cstart[ci], 0, n_center]], dtype=np.int64)
        if len(hs):
            seg = np.concatenate([[0], np.flatnonzero(hs[1:] != hs[:-1] + hl[:-1]) + 1])
            lens = np.add.reduceat(hl, seg)
            local = n_center + np.cumsum(lens) - lens
            runs = np.concatenate([runs, np.column_stack([hs[seg], local, lens]).astype(np.int64)])
            runs = runs[np.argsort(runs[:, 0])]
        S = np.empty(int(runs[:, 2].sum()), dtype=self.dtype)
        for g, lo, ln in runs:
            self._read(S[lo:lo + ln], int(g))
        return _WorkingSet(ci, S, runs, n_center, chunk, man.counts[chunk], halo)

    def save(self, ws: _WorkingSet):
        if not self.resident:
            self._write(ws.S[:ws.n_center], int(self.cstart[ws.ci]))

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    # -- Pass A -------------------------------------------------------------
    def pass_a(self) -> BoundedMaxQueue:
        man = self.store.manifest
        queue = BoundedMaxQueue(self.report.target)
        if not self.resident:
            os.makedirs(self.workdir, exist_ok=True)
            self.close()
            self._fh = open(os.path.join(self.workdir, STATE_FILE), "w+b")
        single_voxel = len(man) == 1
        fname = self.feature[0] if self.feature else None
        for ci in range(self.n_chunks):
            chunk = self.chunk(ci)
            vox = np.concatenate([chunk, self._halo(chunk)])
            sizes = man.counts[vox]
            starts = np.concatenate([[0], np.cumsum(sizes)])
            n = int(starts[-1])
            # separate contiguous columns, so the kd-tree can use them without copying
            ids = np.empty(n, dtype=np.uint64)
            pos = np.empty((n, 3), dtype=np.float64)
            feat = np.empty((n, 3), dtype=self.feature[1]) if fname else None
            for lv in range(len(vox)):
                rec = self.store.load_index(int(vox[lv])).records
                lo, hi = starts[lv], starts[lv + 1]
                ids[lo:hi] = rec["id"]
                pos[lo:hi] = rec["pos"]
                if fname:
                    feat[lo:hi] = rec[fname]
            del rec
            nc = int(starts[len(chunk)])
            point_vox = np.repeat(np.arange(len(vox), dtype=np.int32), sizes)
            # global row of local record r is vbase[point_vox[r]] + r
            vbase = self.vstart[vox] - starts[:-1]
            S = self._chunk_states(ids, pos, feat, unpack_keys(man.packed[vox]), point_vox, vbase, nc, single_voxel)
            del ids, pos, feat, point_vox
            queue.push_batch(S["cost"], S["id"])
            seg = starts[:len(chunk)]
            man.max_cost[chunk] = np.maximum.reduceat(S["cost"], seg) if nc else math.nan
            man.dirty[chunk] = 0
            if self.resident:
                self._resident = _WorkingSet(0, S, np.array([[0, 0, nc]], dtype=np.int64), nc, chunk,
                                             man.counts[chunk], np.zeros(0, np.int64))
            else:
                self._write(S, int(self.cstart[ci]))
            del S
        return queue

    def _weights(self, d, fp, fq) -> np.ndarray:
        """Cost contributions at distances ``d``; ``fp``/``fq`` are the attributes of the
        point and its neighbors when the cost kind uses them."""
        p = self.p
        kind = p.cost.kind
        if kind is CostKind.YUKSEL:
            return yuksel_weight(d, self.yuksel_r, self.yuksel_rmin, p.cost.yuksel.alpha)
        with np.errstate(over="ignore"):
            w = inverse_square(d, p.cost.epsilon_d)
        if kind is CostKind.KNN_NORMAL:
            w = w * normal_weight(fp, fq)
        elif kind is CostKind.KNN_COLOR:
            w = w * color_weight(fp, fq, p.cost.sigma_c)
        return w

    def _chunk_states(self, ids, pos, feat, vkeys, point_vox, vbase, nc, single_voxel) -> np.ndarray:
        p = self.p
        m = p.m
        S = np.zeros(nc, dtype=self.dtype)
        S["id"] = ids[:nc]
        S["pos"] = pos[:nc]
        if feat is not None:
            S[self.feature[0]] = feat[:nc]
        S["alive"] = 1
        S["nbr"] = -1
        if nc == 0:
            return S
        tree = KdTree(ids, pos)

        def accept(rows, cand):
            diff = np.abs(vkeys[point_vox[cand]] - vkeys[point_vox[rows]][:, None, :])
            return diff.max(axis=-1) <= 1

        batch = self.query_batch
        for s in range(0, nc, batch):
            e = min(nc, s + batch)
            idx, d = tree.knn_batch(pos[s:e], m, exclude=ids[s:e],
                                    accept=None if single_voxel else (lambda r, c: accept(r + s, c)),
                                    workers=p.workers, batch=batch)
            valid = idx >= 0
            safe = np.where(valid, idx, 0)
            fp = fq = None
            if feat is not None:
                fp, fq = feat[s:e][:, None, :], feat[safe]
            w = np.where(valid, self._weights(d, fp, fq), 0.0)
            S["nbr"][s:e] = np.where(valid, vbase[point_vox[safe]] + safe, -1)
            S["blen"][s:e] = valid.sum(axis=1)
            S["cost"][s:e] = sum_first_k(w, valid, self.keff)
        return S

    # -- Pass B -------------------------------------------------------------
    def pass_b(self, w_up: float, iteration: int) -> tuple[int, int, bool]:
        man = self.store.manifest
        nv = len(man)
        nch = self.n_chunks
        self.mark_count = np.zeros(nch, dtype=np.int32)
        # chunks whose working set holds a mark of the current round
        self.touched = np.zeros(nch, dtype=bool)
        # voxels that lost points this iteration
        self.changed = np.zeros(nv, dtype=bool)
        quota = man.total_points - self.report.target
        removed = 0
        rnd = 0
        while removed < quota:
            rnd += 1
            marks = self._sweep_mark(w_up, rnd)
            if marks == 0:
                break
            thr = self._threshold(rnd, quota - removed) if marks > quota - removed else None
            removed += self._sweep_remove(w_up, rnd, thr, iteration, forced=False)
        forced = False
        if removed == 0 and quota > 0:
            rnd += 1
            self._mark_best(rnd)
            removed += self._sweep_remove(w_up, rnd, None, iteration, forced=True)
            forced = True
        return removed, rnd, forced

    def _touch(self, ws: _WorkingSet):
        self.touched[ws.ci] = True
        if len(ws.halo):
            self.touched[self.chunk_of[ws.halo]] = True

    def _sweep_mark(self, w_up: float, rnd: int) -> int:
        man = self.store.manifest
        # one chunk per call, so a working set is released before the next is loaded
        return sum(self._mark_chunk(ci, w_up, rnd) for ci in np.unique(self.chunk_of[man.max_cost > w_up]))

    def _mark_chunk(self, ci: int, w_up: float, rnd: int) -> int:
        ws = self.load(ci)
        S = ws.S
        cand = (S["alive"] == 1) & (S["dirty"] == 0) & (S["cost"] > w_up)
        rows = np.flatnonzero(cand)
        if rows.size == 0:
            return 0
        cost = S["cost"]
        ids = S["id"]
        beaten = np.zeros(len(S), dtype=bool)
        for b0 in range(0, rows.size, self.row_batch):
            r = rows[b0:b0 + self.row_batch]
            nbr = S["nbr"][r]
            G = ws.local(nbr)
            # only the first k valid entries feed a cost or the dirty test, so
            # later entries never couple two removals
            ok = (G >= 0) & (np.cumsum(nbr >= 0, axis=1, dtype=np.int16) <= self.keff)
            tg = np.where(ok, G, 0)
            ok &= cand[tg]
            cs, ct = cost[r][:, None], cost[tg]
            src_wins = (cs > ct) | ((cs == ct) & (ids[r][:, None] > ids[tg]))
            beaten[np.broadcast_to(r[:, None], G.shape)[ok & ~src_wins]] = True
            beaten[tg[ok & src_wins]] = True
        hit = np.flatnonzero(cand[:ws.n_center] & ~beaten[:ws.n_center])
        if hit.size == 0:
            return 0
        S["mark"][hit] = rnd
        self.mark_count[ci] += hit.size
        self._touch(ws)
        self.save(ws)
        return int(hit.size)

    def _marked(self, rnd: int):
        """Sortable cost keys and ids of the points marked in round ``rnd``, per chunk."""
        for ci in np.flatnonzero(self.mark_count):
            S = self.read_center(ci)
            sel = S["mark"] == rnd
            yield cost_key(S["cost"][sel]), S["id"][sel]

    def _threshold(self, rnd: int, quota: int) -> tuple[float, int]:
        """``(cost, id)`` of the quota-th best marked point when a round would overshoot."""
        key, pid = rank_select(lambda: self._marked(rnd), quota, self.select_limit)
        return float(key_cost(np.array([key], dtype=np.uint64))[0]), pid

    def _mark_best(self, rnd: int):
        best = None
        for ci in range(self.n_chunks):
            S = self.read_center(ci)
            ok = np.flatnonzero((S["alive"] == 1) & (S["dirty"] == 0))
            if ok.size == 0:
                continue
            j = ok[np.lexsort((S["id"][ok], S["cost"][ok]))[-1]]
            key = (float(S["cost"][j]), int(S["id"][j]))
            if best is None or key > best[0]:
                best = (key, ci, int(j))
        if best is None:
            raise InvariantViolation("no removable point left although the target is not reached")
        _, ci, j = best
        ws = self.load(ci)
        ws.S["mark"][j] = rnd
        self.mark_count[ci] += 1
        self._touch(ws)
        self.save(ws)

    def _sweep_remove(self, w_up: float, rnd: int, thr, iteration: int, forced: bool) -> int:
        removed = sum(self._remove_chunk(ci, w_up, rnd, thr, iteration, forced)
                      for ci in np.flatnonzero(self.touched))
        self.mark_count[:] = 0
        self.touched[:] = False
        return removed

    def _remove_chunk(self, ci: int, w_up: float, rnd: int, thr, iteration: int, forced: bool) -> int:
        man = self.store.manifest
        ws = self.load(ci)
        S = ws.S
        nc = ws.n_center
        eff = S["mark"] == rnd
        if thr is not None:
            c, i = S["cost"], S["id"]
            eff &= (c > thr[0]) | ((c == thr[0]) & (i >= np.uint64(thr[1])))
            drop = (S["mark"][:nc] == rnd) & ~eff[:nc]
            S["mark"][:nc][drop] = 0
        kill = np.flatnonzero(eff[:nc] & (S["alive"][:nc] == 1))
        if kill.size:
            self._check_and_log(ws, kill, w_up, iteration, forced)
            S["alive"][kill] = 0
            self.changed[ws.center_point_vox(kill)] = True
        alive = S["alive"]
        for b0 in range(0, nc, self.row_batch):
            b1 = min(nc, b0 + self.row_batch)
            nbr = S["nbr"][b0:b1]
            G = ws.local(nbr)
            okg = G >= 0
            hit = okg & eff[np.where(okg, G, 0)]
            aff = np.flatnonzero(hit.any(axis=1) & (alive[b0:b1] == 1))
            if aff.size == 0:
                continue
            nbr = nbr[aff]
            nbr[hit[aff]] = -1
            rows = aff + b0
            S["nbr"][rows] = nbr
            valid = nbr >= 0
            tg = np.where(valid, G[aff], 0)
            # same operand order as the search, so the weights repeat bit for bit
            d = euclidean(S["pos"][rows][:, None, :], S["pos"][tg])
            fp = fq = None
            if self.feature:
                f = S[self.feature[0]]
                fp, fq = f[rows][:, None, :], f[tg]
            w = np.where(valid, self._weights(d, fp, fq), 0.0)
            S["cost"][rows] = sum_first_k(w, valid, self.keff)
            S["dirty"][rows] = valid.sum(axis=1) < np.minimum(self.keff, S["blen"][rows])
        if nc:
            part = S[:nc]
            live = (part["alive"] == 1) & (part["dirty"] == 0)
            seg = ws.segments
            top = np.maximum.reduceat(np.where(live, part["cost"], -np.inf), seg)
            man.max_cost[ws.center_vox] = np.where(top > -np.inf, top, np.nan)
            stale = (part["alive"] == 1) & (part["dirty"] == 1)
            man.dirty[ws.center_vox] = np.add.reduceat(stale.astype(np.int64), seg)
        self.save(ws)
        return int(kill.size)

    def _check_and_log(self, ws: _WorkingSet, rows: np.ndarray, w_up: float, iteration: int, forced: bool):
        S = ws.S
        if np.any(S["dirty"][rows] != 0):
            raise InvariantViolation("attempted to remove a dirty point")
        if not forced and np.any(S["cost"][rows] <= w_up):
            raise InvariantViolation("attempted to remove a point whose cost does not exceed w_up")
        if self._audit is None:
            return
        keys = unpack_keys(self.store.manifest.packed[ws.center_point_vox(rows)])
        tail = " forced" if forced else ""
        order = np.lexsort((S["id"][rows], -S["cost"][rows]))
        for j in order:
            r = rows[j]
            i, jj, kk = keys[j]
            self._audit.write(f"{iteration} {i},{jj},{kk} {int(S['id'][r])} {float(S['cost'][r])!r} {w_up!r}{tail}\n")

    # -- commit -------------------------------------------------------------
    def commit(self):
        man = self.store.manifest
        # descending, so deleting an emptied voxel never shifts one still to visit
        for v in np.flatnonzero(self.changed)[::-1]:
            n = int(man.counts[v])
            row = int(self.vstart[v])
            if self.resident:
                part = self._resident.S[row:row + n]
            else:
                part = np.empty(n, dtype=self.dtype)
                self._read(part, row)
            page = self.store.load_index(v)
            if not np.array_equal(page.ids, part["id"]):
                raise InvariantViolation(f"voxel {man.key(v)}: cached states out of sync with the store")
            page.set_alive(part["alive"] == 1)
            self.store.commit_removals(page, save=False)
        self.store.save_manifest()
        self._resident = None
        self.close()
        if os.path.isdir(self.workdir):
            shutil.rmtree(self.workdir)


# -- checkpoints ------------------------------------------------------------

_CKPT_MAGIC = b"PDSCKPT1"


def _write_checkpoint(store: VoxelStore, params: _Params, report: DecimationReport, queue, completed: bool):
    """Manifest hash, parameters, report and queue contents, written atomically.

    Layout: magic, u8 length + JSON metadata, u8 entry count, then the queue's
    costs (f8) and ids (u8) in heap order, streamed without copies.
    """
    meta = {
        "params": params.to_dict(),
        "report": asdict(report),
        "manifest_hash": store.manifest_hash(),
        "completed": completed,
    }
    head = json.dumps(meta).encode()
    costs, ids = queue.buffers() if queue is not None else (b"", b"")
    count = len(queue) if queue is not None else 0
    path = os.path.join(store.directory, CHECKPOINT)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        f.write(struct.pack("<Q", count))
        f.write(costs)
        f.write(ids)
    os.replace(tmp, path)


def read_checkpoint(path) -> dict:
    """Checkpoint metadata with the queue as ``queue_cost``/``queue_id``, sorted by ``(cost, id)``."""
    try:
        with open(path, "rb") as f:
            if f.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
                raise ValueError("bad magic")
            (size,) = struct.unpack("<Q", f.read(8))
            meta = json.loads(f.read(size).decode())
            (count,) = struct.unpack("<Q", f.read(8))
            costs = np.fromfile(f, dtype="<f8", count=count)
            ids = np.fromfile(f, dtype="<u8", count=count)
        if len(costs) != count or len(ids) != count:
            raise ValueError("truncated queue")
    except (OSError, ValueError, KeyError, struct.error) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    order = np.lexsort((ids, costs))
    meta["queue_cost"], meta["queue_id"] = costs[order], ids[order]
    return meta


# -- public API -------------------------------------------------------------

def decimate(store: VoxelStore, lam: float, cost_config: Optional[CostConfig] = None,
             k: Optional[int] = None, b: Optional[int] = None, seed: int = 0, *,
             memory_budget: Optional[int] = None, workers: int = 1, audit: bool = False,
             max_iterations: Optional[int] = None) -> DecimationReport:
    """Decimate ``store`` in place until ``floor(lam * |C|)`` points remain.

    Parameters
    ----------
    store : voxelized cloud, modified in place
    lam : kept fraction, strictly between 0 and 1
    cost_config : ranking function; its ``k`` is overridden by ``k`` when given
    k, b : neighbors summed into the cost and extra buffered neighbors (default k+b = 14)
    seed : recorded in the report; the algorithm itself is deterministic
    memory_budget : bytes available for resident data; ``None`` keeps everything in
        memory, smaller budgets page neighbor caches through ``<store>/work``
    workers : threads for the neighbor searches
    audit : append one line per removal to ``<store>/audit.log``
    max_iterations : stop after this many iterations (the checkpoint allows resuming)
    """
    cost_config = cost_config or CostConfig()
    if k is not None:
        cost_config = replace(cost_config, k=k)
    k = cost_config.k
    if b is None:
        b = max(DEFAULT_BUFFER_TOTAL - k, 0)
    if b < 0 or k + b > 254:
        raise ConfigError("buffer size must satisfy 0 <= b and k + b <= 254")
    if memory_budget is not None and memory_budget < 0:
        raise MemoryBudgetError("memory budget must be non-negative")
    total = store.manifest.total_points
    target = target_count(lam, total)
    cost_config = replace(cost_config, yuksel=replace(cost_config.yuksel, lam=lam))
    if target < 1:
        raise ConfigError(f"target count floor({lam} * {total}) is zero")
    params = _Params(float(lam), cost_config, int(k), int(b), int(seed), memory_budget, int(workers), bool(audit))
    report = DecimationReport(original_count=total, target=target, seed=int(seed), final_count=total)
    audit_path = os.path.join(store.directory, AUDIT_LOG)
    if audit:
        open(audit_path, "w").close()
    return _loop(store, params, report, max_iterations)


def resume(store: VoxelStore, checkpoint=None, max_iterations: Optional[int] = None) -> DecimationReport:
    """Continue a decimation from the checkpoint written at the last iteration boundary."""
    path = checkpoint or os.path.join(store.directory, CHECKPOINT)
    meta = read_checkpoint(path)
    if meta["manifest_hash"] != store.manifest_hash():
        raise CheckpointError("checkpoint does not match the store manifest")
    report = DecimationReport.from_dict(meta["report"])
    if meta["completed"]:
        return report
    params = _Params.from_dict(meta["params"])
    return _loop(store, params, report, max_iterations)


def _loop(store: VoxelStore, params: _Params, report: DecimationReport, max_iterations) -> DecimationReport:
    run = _Run(store, params, report)
    if params.audit:
        run._audit = open(os.path.join(store.directory, AUDIT_LOG), "a")
    done_here = 0
    try:
        while store.manifest.total_points > report.target:
            if max_iterations is not None and done_here >= max_iterations:
                break
            t0 = time.perf_counter()
            iteration = report.iterations + 1
            run.plan_chunks()
            queue = run.pass_a()
            w_up = queue.w_up
            removed, rounds, forced = run.pass_b(w_up, iteration)
            run.commit()
            report.iterations = iteration
            report.removed_per_iteration.append(int(removed))
            report.rounds_per_iteration.append(int(rounds))
            report.forced_removals += int(forced)
            report.wall_time_per_iteration.append(time.perf_counter() - t0)
            report.final_count = store.manifest.total_points
            report.chunks = run.n_chunks
            log.info("iteration %d: w_up=%.6g removed=%d rounds=%d remaining=%d",
                     iteration, w_up, removed, rounds, report.final_count)
            _write_checkpoint(store, params, report, queue, report.final_count == report.target)
            done_here += 1
            del queue
    finally:
        run.close()
        if run._audit is not None:
            run._audit.close()
    if report.final_count == report.target:
        _write_checkpoint(store, params, report, None, True)
    return report

