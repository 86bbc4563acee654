"""Binary little-endian PLY reading and writing.

Only the ``vertex`` element is interpreted. Recognised properties are ``x y z``
(float or double), ``nx ny nz``, ``red green blue`` and an optional integer ``id``;
anything else is carried through as an extra scalar column.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .core import PointCloud
from .errors import PlyError

_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "<i2", "int16": "<i2",
    "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4",
    "uint": "<u4", "uint32": "<u4",
    "float": "<f4", "float32": "<f4",
    "double": "<f8", "float64": "<f8",
    # not in the original PLY spec, but needed for 64-bit point ids
    "int64": "<i8", "uint64": "<u8",
}
_NAMES = {"<f4": "float", "<f8": "double", "u1": "uchar", "<u4": "uint", "<u8": "uint64", "<i4": "int"}


@dataclass
class PlyHeader:
    count: int
    dtype: np.dtype
    data_offset: int

    @property
    def names(self) -> tuple[str, ...]:
        return self.dtype.names

    @property
    def has_normals(self) -> bool:
        return all(n in self.names for n in ("nx", "ny", "nz"))

    @property
    def has_colors(self) -> bool:
        return all(n in self.names for n in ("red", "green", "blue"))

    @property
    def has_ids(self) -> bool:
        return "id" in self.names


def read_header(path) -> PlyHeader:
    with open(path, "rb") as f:
        first = f.readline()
        if first.strip() != b"ply":
            raise PlyError(f"{path}: not a PLY file")
        fields = []
        count = None
        element = None
        seen_vertex = False
        while True:
            raw = f.readline()
            if not raw:
                raise PlyError(f"{path}: header has no end_header line")
            line = raw.decode("ascii", errors="replace").strip()
            if not line or line.startswith("comment") or line.startswith("obj_info"):
                continue
            tokens = line.split()
            if tokens[0] == "format":
                if len(tokens) < 2 or tokens[1] != "binary_little_endian":
                    raise PlyError(f"{path}: only binary_little_endian is supported, got {line!r}")
            elif tokens[0] == "element":
                if len(tokens) != 3:
                    raise PlyError(f"{path}: bad element line {line!r}")
                element = tokens[1]
                if element == "vertex":
                    try:
                        count = int(tokens[2])
                    except ValueError:
                        raise PlyError(f"{path}: bad vertex count {tokens[2]!r}") from None
                    seen_vertex = True
                elif not seen_vertex:
                    raise PlyError(f"{path}: elements before 'vertex' are not supported")
            elif tokens[0] == "property":
                if element != "vertex":
                    continue
                if tokens[1] == "list":
                    raise PlyError(f"{path}: list properties on vertices are not supported")
                if len(tokens) != 3 or tokens[1] not in _TYPES:
                    raise PlyError(f"{path}: unsupported property line {line!r}")
                fields.append((tokens[2], _TYPES[tokens[1]]))
            elif tokens[0] == "end_header":
                break
            else:
                raise PlyError(f"{path}: unexpected header line {line!r}")
        offset = f.tell()
    if count is None:
        raise PlyError(f"{path}: no vertex element")
    try:
        dtype = np.dtype(fields)
    except (TypeError, ValueError) as exc:
        raise PlyError(f"{path}: invalid property list: {exc}") from None
    for axis in "xyz":
        if axis not in dtype.names:
            raise PlyError(f"{path}: missing required property {axis!r}")
        if dtype[axis].kind != "f":
            raise PlyError(f"{path}: property {axis!r} must be float or double")
    size = os.path.getsize(path)
    if size < offset + count * dtype.itemsize:
        raise PlyError(f"{path}: file truncated ({size} bytes, header announces {count} vertices)")
    return PlyHeader(count, dtype, offset)


def _to_cloud(raw: np.ndarray, header: PlyHeader, first_id: int, sort: bool) -> PointCloud:
    positions = np.stack([raw["x"], raw["y"], raw["z"]], axis=1).astype(np.float64)
    if header.has_ids:
        ids = raw["id"].astype(np.uint64)
    else:
        ids = np.arange(first_id, first_id + len(raw), dtype=np.uint64)
    normals = None
    if header.has_normals:
        normals = np.stack([raw["nx"], raw["ny"], raw["nz"]], axis=1).astype(np.float32)
    colors = None
    if header.has_colors:
        colors = np.stack([raw["red"], raw["green"], raw["blue"]], axis=1).astype(np.uint8)
    known = {"x", "y", "z", "nx", "ny", "nz", "red", "green", "blue", "id"}
    extra = {n: np.array(raw[n]) for n in header.names if n not in known}
    if not np.all(np.isfinite(positions)):
        raise PlyError("non-finite vertex position")
    if sort and len(ids) > 1 and not np.all(ids[1:] > ids[:-1]):
        order = np.argsort(ids, kind="stable")
        ids = ids[order]
        if np.any(ids[1:] == ids[:-1]):
            raise PlyError("duplicate point ids")
        positions = positions[order]
        normals = None if normals is None else normals[order]
        colors = None if colors is None else colors[order]
        extra = {n: v[order] for n, v in extra.items()}
    return PointCloud(ids, positions, normals, colors, extra)


def iter_chunks(path, chunk_size: int = 1 << 20) -> Iterator[PointCloud]:
    """Stream the vertices of ``path`` in chunks of at most ``chunk_size`` points.

    Chunks keep file order; ids are not required to be sorted.
    """
    header = read_header(path)
    with open(path, "rb") as f:
        f.seek(header.data_offset)
        done = 0
        while done < header.count:
            n = min(chunk_size, header.count - done)
            raw = np.fromfile(f, dtype=header.dtype, count=n)
            if len(raw) != n:
                raise PlyError(f"{path}: truncated vertex data")
            yield _to_cloud(raw, header, done, sort=False)
            done += n


def read_ply(path) -> PointCloud:
    header = read_header(path)
    with open(path, "rb") as f:
        f.seek(header.data_offset)
        raw = np.fromfile(f, dtype=header.dtype, count=header.count)
    if len(raw) != header.count:
        raise PlyError(f"{path}: truncated vertex data")
    return _to_cloud(raw, header, 0, sort=True)


def vertex_dtype(normals: bool, colors: bool, ids: bool, extra: dict | None = None) -> np.dtype:
    fields = []
    if ids:
        fields.append(("id", "<u8"))
    fields += [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    if normals:
        fields += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
    if colors:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    for name, values in (extra or {}).items():
        fields.append((name, np.asarray(values).dtype.newbyteorder("<").str))
    return np.dtype(fields)


def _header_bytes(dtype: np.dtype, count: int) -> bytes:
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {count}"]
    for name in dtype.names:
        code = dtype[name].str
        if code == "|u1":
            code = "u1"
        if code not in _NAMES:
            raise PlyError(f"cannot write property {name!r} of type {dtype[name]}")
        lines.append(f"property {_NAMES[code]} {name}")
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


class PlyWriter:
    """Incremental writer; the vertex count must be known up front."""

    def __init__(self, path, count: int, normals: bool = False, colors: bool = False,
                 ids: bool = False, extra_dtypes: Optional[dict] = None):
        self.path = os.fspath(path)
        self.count = count
        self.dtype = vertex_dtype(normals, colors, ids, {k: np.zeros(0, v) for k, v in (extra_dtypes or {}).items()})
        self._written = 0
        self._tmp = self.path + ".tmp"
        self._f = open(self._tmp, "wb")
        self._f.write(_header_bytes(self.dtype, count))

    def write(self, cloud: PointCloud, extra: Optional[dict] = None):
        values = dict(cloud.extra)
        values.update(extra or {})
        self.write_columns(cloud.ids, cloud.positions, cloud.normals, cloud.colors, values)

    def write_columns(self, ids, positions, normals=None, colors=None, extra: Optional[dict] = None):
        """Write raw columns; ids need not be sorted (used for voxel-order streaming)."""
        rec = np.empty(len(positions), dtype=self.dtype)
        names = self.dtype.names
        if "id" in names:
            rec["id"] = ids
        rec["x"], rec["y"], rec["z"] = np.asarray(positions).T
        if "nx" in names:
            rec["nx"], rec["ny"], rec["nz"] = np.asarray(normals).T
        if "red" in names:
            rec["red"], rec["green"], rec["blue"] = np.asarray(colors).T
        for name in names:
            if name not in ("id", "x", "y", "z", "nx", "ny", "nz", "red", "green", "blue"):
                rec[name] = extra[name]
        rec.tofile(self._f)
        self._written += len(rec)

    def close(self):
        self._f.close()
        if self._written != self.count:
            os.unlink(self._tmp)
            raise PlyError(f"{self.path}: wrote {self._written} vertices, header announced {self.count}")
        os.replace(self._tmp, self.path)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self._f.close()
            if os.path.exists(self._tmp):
                os.unlink(self._tmp)


def write_ply(path, cloud: PointCloud, ids: bool = False, extra: Optional[dict] = None):
    """Write ``cloud`` with double-precision positions.

    ``ids=True`` adds a ``uint64 id`` property so subsets can be traced back to their
    source points; ``extra`` maps property names to per-point scalar arrays.
    """
    extra = dict(extra or {})
    for name, values in cloud.extra.items():
        extra.setdefault(name, values)
    with PlyWriter(path, len(cloud), cloud.normals is not None, cloud.colors is not None, ids,
                   {k: np.asarray(v).dtype for k, v in extra.items()}) as w:
        w.write(cloud, extra)
