"""On-disk voxel grid used as the out-of-core representation of a cloud.

Layout of a store directory::

    manifest.txt          human-readable key/value manifest
    vx_<i>_<j>_<k>.bin    packed little-endian point records of one voxel

Records are stored in arrival order. Per-voxel bookkeeping lives in numpy arrays
(sorted by key) rather than dicts so that stores with many voxels stay small in
memory.
"""
from __future__ import annotations

import hashlib
import logging
import math
import os
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .core import Aabb, PointCloud
from .errors import ConfigError, DataError, StoreCorruptionError
from .ply import PlyWriter, iter_chunks

log = logging.getLogger(__name__)

MANIFEST = "manifest.txt"
DEFAULT_MAX_VOXEL_POINTS = 50_000_000
_KEY_BITS = 21
_KEY_OFFSET = 1 << (_KEY_BITS - 1)
_KEY_MASK = (1 << _KEY_BITS) - 1
FLAG_ALIVE = 1

# Offsets of the 27-voxel neighborhood in lexicographic order; index 13 is the center.
NEIGHBOR_OFFSETS = np.array(
    [(di, dj, dk) for di in (-1, 0, 1) for dj in (-1, 0, 1) for dk in (-1, 0, 1)], dtype=np.int64
)
CENTER_SLOT = 13


def record_dtype(normals: bool, colors: bool) -> np.dtype:
    fields = [("id", "<u8"), ("pos", "<f8", (3,)), ("flags", "u1")]
    if normals:
        fields.append(("normal", "<f4", (3,)))
    if colors:
        fields.append(("color", "u1", (3,)))
    return np.dtype(fields)


def pack_keys(keys: np.ndarray) -> np.ndarray:
    """Pack (i, j, k) triples into int64 values whose order is lexicographic."""
    keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
    if keys.size and (keys.min() < -_KEY_OFFSET or keys.max() >= _KEY_OFFSET):
        raise ConfigError("voxel grid too fine: keys exceed the supported range of +-2^20 per axis")
    s = keys + _KEY_OFFSET
    return (s[:, 0] << (2 * _KEY_BITS)) | (s[:, 1] << _KEY_BITS) | s[:, 2]


def unpack_keys(packed: np.ndarray) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.int64)
    out = np.empty((len(packed), 3), dtype=np.int64)
    out[:, 0] = (packed >> (2 * _KEY_BITS)) & _KEY_MASK
    out[:, 1] = (packed >> _KEY_BITS) & _KEY_MASK
    out[:, 2] = packed & _KEY_MASK
    return out - _KEY_OFFSET


def voxel_filename(key) -> str:
    i, j, k = (int(v) for v in key)
    return f"vx_{i}_{j}_{k}.bin"


@dataclass(frozen=True)
class VoxelKey:
    i: int
    j: int
    k: int

    def __iter__(self):
        return iter((self.i, self.j, self.k))


@dataclass
class ManifestEntry:
    key: tuple[int, int, int]
    point_count: int
    max_cost: Optional[float]
    dirty_count: int


class Manifest:
    """Grid geometry plus per-voxel counts, kept as parallel arrays sorted by key."""

    def __init__(self, origin, voxel_size: float, packed=None, counts=None, max_cost=None,
                 dirty=None, normals: bool = False, colors: bool = False, bbox_max=None):
        if not voxel_size > 0 or not math.isfinite(voxel_size):
            raise ConfigError(f"voxel_size must be a positive real, got {voxel_size}")
        self.origin = np.asarray(origin, dtype=np.float64).reshape(3)
        self.voxel_size = float(voxel_size)
        self.bbox_max = self.origin.copy() if bbox_max is None else np.asarray(bbox_max, dtype=np.float64)
        self.normals = normals
        self.colors = colors
        self.packed = np.zeros(0, np.int64) if packed is None else np.asarray(packed, np.int64)
        n = len(self.packed)
        self.counts = np.zeros(n, np.int64) if counts is None else np.asarray(counts, np.int64)
        self.max_cost = np.full(n, np.nan) if max_cost is None else np.asarray(max_cost, np.float64)
        self.dirty = np.zeros(n, np.int32) if dirty is None else np.asarray(dirty, np.int32)

    # -- lookup -------------------------------------------------------------
    def __len__(self) -> int:
        return len(self.packed)

    @property
    def total_points(self) -> int:
        return int(self.counts.sum())

    @property
    def keys(self) -> np.ndarray:
        return unpack_keys(self.packed)

    def key(self, index: int) -> tuple[int, int, int]:
        return tuple(int(v) for v in unpack_keys(self.packed[index:index + 1])[0])

    def find(self, keys) -> np.ndarray:
        """Indices of ``keys`` in the manifest, -1 where absent."""
        packed = pack_keys(keys)
        pos = np.searchsorted(self.packed, packed)
        pos = np.minimum(pos, max(len(self.packed) - 1, 0))
        hit = len(self.packed) > 0
        found = (self.packed[pos] == packed) if hit else np.zeros(len(packed), bool)
        return np.where(found, pos, -1)

    def index(self, key) -> int:
        idx = int(self.find(np.asarray(tuple(key)).reshape(1, 3))[0])
        if idx < 0:
            raise KeyError(tuple(key))
        return idx

    def __contains__(self, key) -> bool:
        return int(self.find(np.asarray(tuple(key)).reshape(1, 3))[0]) >= 0

    def entry(self, key) -> ManifestEntry:
        i = self.index(key)
        mc = float(self.max_cost[i])
        return ManifestEntry(tuple(int(v) for v in key), int(self.counts[i]),
                             None if math.isnan(mc) else mc, int(self.dirty[i]))

    def entries(self) -> Iterator[ManifestEntry]:
        for i in range(len(self)):
            yield self.entry(self.key(i))

    def neighbor_indices(self, indices) -> np.ndarray:
        """``(n, 27)`` manifest indices of the 27-voxel neighborhood (-1 = absent)."""
        indices = np.atleast_1d(np.asarray(indices, dtype=np.int64))
        keys = unpack_keys(self.packed[indices])
        cand = (keys[:, None, :] + NEIGHBOR_OFFSETS[None, :, :]).reshape(-1, 3)
        return self.find(cand).reshape(len(indices), 27)

    def key_of(self, positions: np.ndarray) -> np.ndarray:
        return np.floor((np.asarray(positions) - self.origin) / self.voxel_size).astype(np.int64)

    @property
    def bounds(self) -> Aabb:
        return Aabb(tuple(self.origin), tuple(self.bbox_max))

    # -- mutation -----------------------------------------------------------
    def remove(self, index: int):
        keep = np.ones(len(self), bool)
        keep[index] = False
        self._filter(keep)

    def _filter(self, keep):
        self.packed = self.packed[keep]
        self.counts = self.counts[keep]
        self.max_cost = self.max_cost[keep]
        self.dirty = self.dirty[keep]

    def drop_empty(self):
        self._filter(self.counts > 0)

    # -- text format --------------------------------------------------------
    def iter_text(self, batch: int = 256) -> Iterator[str]:
        """The manifest text in pieces of at most ``batch`` voxel lines."""
        fields = [name for name, on in (("normal", self.normals), ("color", self.colors)) if on]
        yield "\n".join([
            "origin " + " ".join(repr(float(v)) for v in self.origin),
            f"voxel_size {self.voxel_size!r}",
            "bbox_max " + " ".join(repr(float(v)) for v in self.bbox_max),
            f"total_points {self.total_points}",
            "fields " + " ".join(fields) if fields else "fields",
        ]) + "\n"
        for s in range(0, len(self), batch):
            keys = unpack_keys(self.packed[s:s + batch])
            lines = []
            for n in range(len(keys)):
                i, j, k = keys[n]
                mc = self.max_cost[s + n]
                mcs = "-" if math.isnan(mc) else repr(float(mc))
                lines.append(f"voxel {i} {j} {k} {self.counts[s + n]} {mcs} {self.dirty[s + n]}\n")
            yield "".join(lines)

    def to_text(self) -> str:
        return "".join(self.iter_text())

    @classmethod
    def from_text(cls, text: str, source: str = "manifest") -> "Manifest":
        origin = voxel_size = bbox_max = None
        total = None
        normals = colors = False
        rows = []
        costs = []
        try:
            for line in text.splitlines():
                tok = line.split()
                if not tok:
                    continue
                if tok[0] == "origin":
                    origin = [float(v) for v in tok[1:4]]
                elif tok[0] == "voxel_size":
                    voxel_size = float(tok[1])
                elif tok[0] == "bbox_max":
                    bbox_max = [float(v) for v in tok[1:4]]
                elif tok[0] == "total_points":
                    total = int(tok[1])
                elif tok[0] == "fields":
                    normals = "normal" in tok[1:]
                    colors = "color" in tok[1:]
                elif tok[0] == "voxel":
                    rows.append((int(tok[1]), int(tok[2]), int(tok[3]), int(tok[4]), int(tok[6])))
                    costs.append(float("nan") if tok[5] == "-" else float(tok[5]))
                else:
                    raise ValueError(f"unknown line {line!r}")
        except (ValueError, IndexError) as exc:
            raise StoreCorruptionError(f"{source}: {exc}") from None
        if origin is None or voxel_size is None:
            raise StoreCorruptionError(f"{source}: missing origin or voxel_size")
        rows = np.array(rows, dtype=np.int64).reshape(-1, 5)
        packed = pack_keys(rows[:, :3])
        if len(packed) > 1 and not np.all(packed[1:] > packed[:-1]):
            raise StoreCorruptionError(f"{source}: voxel lines not in strictly increasing key order")
        m = cls(origin, voxel_size, packed, rows[:, 3], np.array(costs, dtype=np.float64),
                rows[:, 4], normals, colors, bbox_max)
        if total is not None and total != m.total_points:
            raise StoreCorruptionError(f"{source}: total_points {total} != sum of voxel counts {m.total_points}")
        return m


@dataclass
class VoxelPage:
    """The records of one voxel; ``alive`` mirrors bit 0 of the flags byte."""

    key: tuple[int, int, int]
    records: np.ndarray

    @property
    def alive(self) -> np.ndarray:
        return (self.records["flags"] & FLAG_ALIVE).astype(bool)

    def set_alive(self, mask):
        mask = np.asarray(mask, dtype=bool)
        flags = self.records["flags"] & ~np.uint8(FLAG_ALIVE)
        self.records["flags"] = flags | mask.astype(np.uint8)

    def remove_ids(self, ids):
        kill = np.isin(self.records["id"], np.asarray(list(ids), dtype=np.uint64))
        self.set_alive(self.alive & ~kill)

    @property
    def ids(self) -> np.ndarray:
        return self.records["id"]

    @property
    def positions(self) -> np.ndarray:
        return self.records["pos"]

    def __len__(self) -> int:
        return len(self.records)

    def to_cloud(self, alive_only: bool = True) -> PointCloud:
        rec = self.records[self.alive] if alive_only else self.records
        rec = rec[np.argsort(rec["id"], kind="stable")]
        names = rec.dtype.names
        return PointCloud(rec["id"], rec["pos"],
                          rec["normal"] if "normal" in names else None,
                          rec["color"] if "color" in names else None)


def _atomic_write(path: str, data: bytes | np.ndarray):
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        if isinstance(data, np.ndarray):
            data.tofile(f)
        else:
            f.write(data)
    os.replace(tmp, path)


class VoxelStore:
    """A voxelized cloud on disk. Single writer; reads may be concurrent."""

    def __init__(self, directory, manifest: Manifest, max_voxel_points: int = DEFAULT_MAX_VOXEL_POINTS):
        self.directory = os.fspath(directory)
        self.manifest = manifest
        self.dtype = record_dtype(manifest.normals, manifest.colors)
        self.max_voxel_points = max_voxel_points

    # -- construction -------------------------------------------------------
    @classmethod
    def open(cls, directory, verify: bool = True) -> "VoxelStore":
        path = os.path.join(os.fspath(directory), MANIFEST)
        try:
            with open(path) as f:
                text = f.read()
        except OSError as exc:
            raise StoreCorruptionError(f"cannot read manifest: {exc}") from None
        store = cls(directory, Manifest.from_text(text, path))
        if verify:
            store.verify()
        return store

    @classmethod
    def build(cls, cloud_path, voxel_size: float, out_dir, chunk_size: int = 1 << 18,
              buffer_bytes: int = 32 << 20, max_voxel_points: int = DEFAULT_MAX_VOXEL_POINTS) -> "VoxelStore":
        """Voxelize a PLY file by streaming it twice (bounding box, then partition)."""
        if not (isinstance(voxel_size, (int, float)) and voxel_size > 0 and math.isfinite(voxel_size)):
            raise ConfigError(f"voxel_size must be a positive real, got {voxel_size}")
        lo = np.full(3, np.inf)
        hi = np.full(3, -np.inf)
        normals = colors = None
        for chunk in iter_chunks(cloud_path, chunk_size):
            if len(chunk):
                lo = np.minimum(lo, chunk.positions.min(axis=0))
                hi = np.maximum(hi, chunk.positions.max(axis=0))
            normals = chunk.normals is not None
            colors = chunk.colors is not None
        if normals is None:
            normals = colors = False
        if not np.all(np.isfinite(lo)):
            lo = hi = np.zeros(3)
        return cls._partition(lambda: iter_chunks(cloud_path, chunk_size), lo, hi, normals, colors,
                              voxel_size, out_dir, buffer_bytes, max_voxel_points)

    @classmethod
    def from_cloud(cls, cloud: PointCloud, voxel_size: float, out_dir, chunk_size: int = 1 << 18,
                   max_voxel_points: int = DEFAULT_MAX_VOXEL_POINTS) -> "VoxelStore":
        """Voxelize an in-memory cloud (same layout as :meth:`build`)."""
        if not (voxel_size > 0 and math.isfinite(voxel_size)):
            raise ConfigError(f"voxel_size must be a positive real, got {voxel_size}")
        box = cloud.bounds

        def chunks():
            for s in range(0, len(cloud), chunk_size):
                yield cloud.subset(np.arange(s, min(s + chunk_size, len(cloud))))

        return cls._partition(chunks, np.array(box.min), np.array(box.max), cloud.normals is not None,
                              cloud.colors is not None, voxel_size, out_dir, 32 << 20, max_voxel_points)

    @classmethod
    def _partition(cls, chunks, lo, hi, normals, colors, voxel_size, out_dir, buffer_bytes, max_voxel_points):
        out_dir = os.fspath(out_dir)
        try:
            os.makedirs(out_dir, exist_ok=True)
            for name in os.listdir(out_dir):
                if name.startswith("vx_") and name.endswith(".bin") or name == MANIFEST:
                    os.unlink(os.path.join(out_dir, name))
            probe = os.path.join(out_dir, ".write_probe")
            with open(probe, "wb"):
                pass
            os.unlink(probe)
        except OSError as exc:
            raise DataError(f"cannot write store directory {out_dir}: {exc}") from None
        manifest = Manifest(lo, voxel_size, normals=normals, colors=colors, bbox_max=hi)
        store = cls(out_dir, manifest, max_voxel_points)
        counts: dict[int, int] = {}
        pending: dict[int, list] = {}
        pending_bytes = 0

        def flush():
            nonlocal pending_bytes
            for packed, parts in pending.items():
                key = unpack_keys(np.array([packed]))[0]
                with open(os.path.join(out_dir, voxel_filename(key)), "ab") as f:
                    for part in parts:
                        part.tofile(f)
            pending.clear()
            pending_bytes = 0

        for chunk in chunks():
            if not len(chunk):
                continue
            rec = np.empty(len(chunk), dtype=store.dtype)
            rec["id"] = chunk.ids
            rec["pos"] = chunk.positions
            rec["flags"] = FLAG_ALIVE
            if normals:
                rec["normal"] = chunk.normals
            if colors:
                rec["color"] = chunk.colors
            packed = pack_keys(manifest.key_of(chunk.positions))
            order = np.argsort(packed, kind="stable")
            packed_sorted = packed[order]
            starts = np.flatnonzero(np.r_[True, packed_sorted[1:] != packed_sorted[:-1]])
            ends = np.r_[starts[1:], len(order)]
            for s, e in zip(starts, ends):
                pk = int(packed_sorted[s])
                part = rec[order[s:e]]
                pending.setdefault(pk, []).append(part)
                counts[pk] = counts.get(pk, 0) + (e - s)
                pending_bytes += part.nbytes
            if pending_bytes > buffer_bytes:
                flush()
        flush()
        keys = np.array(sorted(counts), dtype=np.int64)
        manifest.packed = keys
        manifest.counts = np.array([counts[int(k)] for k in keys], dtype=np.int64)
        manifest.max_cost = np.full(len(keys), np.nan)
        manifest.dirty = np.zeros(len(keys), np.int32)
        store._warn_large()
        store.save_manifest()
        return store

    def _warn_large(self):
        if len(self.manifest) and self.manifest.counts.max() > self.max_voxel_points:
            big = int(np.argmax(self.manifest.counts))
            log.warning("voxel %s holds %d points, above the in-memory budget of %d; "
                        "consider a smaller voxel size", self.manifest.key(big),
                        int(self.manifest.counts[big]), self.max_voxel_points)

    # -- persistence --------------------------------------------------------
    def save_manifest(self):
        path = os.path.join(self.directory, MANIFEST)
        with open(path + ".tmp", "w", encoding="ascii", newline="\n") as f:
            for piece in self.manifest.iter_text():
                f.write(piece)
        os.replace(path + ".tmp", path)

    def manifest_hash(self) -> str:
        h = hashlib.sha256()
        for piece in self.manifest.iter_text():
            h.update(piece.encode("ascii"))
        return h.hexdigest()

    def verify(self):
        """Check every voxel file exists and matches its manifest count."""
        for n in range(len(self.manifest)):
            path = self.voxel_path(self.manifest.key(n))
            try:
                size = os.path.getsize(path)
            except OSError:
                raise StoreCorruptionError(f"missing voxel file {path}") from None
            if size != self.manifest.counts[n] * self.dtype.itemsize:
                raise StoreCorruptionError(f"{path}: size {size} does not match count {self.manifest.counts[n]}")

    def voxel_path(self, key) -> str:
        return os.path.join(self.directory, voxel_filename(key))

    # -- paging -------------------------------------------------------------
    def load_page(self, key) -> VoxelPage:
        key = tuple(int(v) for v in key)
        idx = self.manifest.index(key)
        path = self.voxel_path(key)
        try:
            records = np.fromfile(path, dtype=self.dtype)
        except (OSError, ValueError) as exc:
            raise StoreCorruptionError(f"cannot read voxel file {path}: {exc}") from None
        if len(records) != self.manifest.counts[idx]:
            raise StoreCorruptionError(
                f"{path}: holds {len(records)} records, manifest says {self.manifest.counts[idx]}")
        return VoxelPage(key, records)

    def load_index(self, index: int) -> VoxelPage:
        return self.load_page(self.manifest.key(index))

    def load_neighborhood(self, key) -> list[VoxelPage]:
        """Center page first, then the existing adjacent voxels in (i, j, k) order."""
        key = tuple(int(v) for v in key)
        if key not in self.manifest:
            raise KeyError(key)
        nbr = self.manifest.neighbor_indices([self.manifest.index(key)])[0]
        pages = [self.load_page(key)]
        for slot, idx in enumerate(nbr):
            if idx >= 0 and slot != CENTER_SLOT:
                pages.append(self.load_index(int(idx)))
        return pages

    def iter_pages(self) -> Iterator[VoxelPage]:
        for n in range(len(self.manifest)):
            yield self.load_index(n)

    def commit_removals(self, page: VoxelPage, save: bool = True) -> Optional[ManifestEntry]:
        """Physically drop dead records of ``page``; returns the updated entry (None if deleted)."""
        idx = self.manifest.index(page.key)
        alive = page.alive
        path = self.voxel_path(page.key)
        if alive.all():
            return self.manifest.entry(page.key)
        if not alive.any():
            os.unlink(path)
            self.manifest.remove(idx)
            if save:
                self.save_manifest()
            return None
        _atomic_write(path, page.records[alive])
        page.records = page.records[alive]
        self.manifest.counts[idx] = len(page.records)
        if save:
            self.save_manifest()
        return self.manifest.entry(page.key)

    # -- whole-cloud views --------------------------------------------------
    def to_cloud(self) -> PointCloud:
        parts = [p.records for p in self.iter_pages()]
        if not parts:
            return PointCloud(np.zeros(0, np.uint64), np.zeros((0, 3)))
        rec = np.concatenate(parts)
        rec = rec[np.argsort(rec["id"], kind="stable")]
        if len(rec) > 1 and np.any(rec["id"][1:] == rec["id"][:-1]):
            raise DataError("store contains duplicate point ids")
        return PointCloud(rec["id"], rec["pos"],
                          rec["normal"] if self.manifest.normals else None,
                          rec["color"] if self.manifest.colors else None)

    def export(self, path, ids: bool = True):
        """Stream all points to a PLY file in voxel order."""
        m = self.manifest
        with PlyWriter(path, m.total_points, m.normals, m.colors, ids) as w:
            for page in self.iter_pages():
                rec = page.records
                w.write_columns(rec["id"], rec["pos"], rec["normal"] if m.normals else None,
                                rec["color"] if m.colors else None)
