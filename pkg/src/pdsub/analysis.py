"""Density-homogeneity statistics for point clouds sampled on surfaces.

For an evenly sampled surface, the number of points within a disk of area ``a``
grows linearly in ``a`` and the slope is the point density. A profile records,
for a grid of areas, the distribution of those neighbor counts over a random sample
of points, and fits ``count = slope * area + intercept`` over all (area, count)
pairs of that sample. Tight bands and a high R^2 mean homogeneous density.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .core import PointCloud
from .errors import ConfigError

FRACTILES = (0.01, 0.10, 0.25, 0.50, 0.75, 0.90, 0.99)
FRACTILE_NAMES = ("p01", "p10", "p25", "p50", "p75", "p90", "p99")
DEFAULT_SAMPLE_SIZE = 10_000
DEFAULT_AREA_COUNT = 20


@dataclass
class Regression:
    slope: float
    intercept: float
    r_squared: float
    rmse: float


def fit_regression(x, y) -> Regression:
    """Ordinary least squares of ``y`` on ``x`` with intercept."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(x) != len(y) or len(x) < 2:
        raise ConfigError("regression needs at least two (x, y) pairs")
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    if sxx == 0:
        raise ConfigError("degenerate regression: all x values are equal")
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    resid = y - (slope * x + intercept)
    ss_res = float(np.sum(resid * resid))
    ss_tot = float(np.sum((y - ym) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return Regression(slope, intercept, min(max(r2, 0.0), 1.0), math.sqrt(ss_res / len(x)))


@dataclass
class DensityProfile:
    areas: np.ndarray
    mean: np.ndarray
    fractiles: np.ndarray  # (len(FRACTILES), len(areas))
    slope: float
    intercept: float
    r_squared: float
    rmse: float
    sample_size: int = 0

    def fractile(self, name: str) -> np.ndarray:
        return self.fractiles[FRACTILE_NAMES.index(name)]

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(("area", "mean") + FRACTILE_NAMES)
        for j, a in enumerate(self.areas):
            w.writerow([repr(float(a)), repr(float(self.mean[j]))] + [repr(float(v)) for v in self.fractiles[:, j]])
        w.writerow(("slope", "intercept", "r2", "rmse"))
        w.writerow([repr(self.slope), repr(self.intercept), repr(self.r_squared), repr(self.rmse)])
        return out.getvalue()

    def write_csv(self, path):
        with open(path, "w") as f:
            f.write(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "DensityProfile":
        rows = list(csv.reader(io.StringIO(text)))
        try:
            footer = rows.index(["slope", "intercept", "r2", "rmse"])
            body = np.array(rows[1:footer], dtype=np.float64)
            slope, intercept, r2, rmse = (float(v) for v in rows[footer + 1])
        except (ValueError, IndexError):
            raise ConfigError("not a density profile CSV") from None
        return cls(body[:, 0], body[:, 1], body[:, 2:].T.copy(), slope, intercept, r2, rmse)


def expected_spacing(cloud: PointCloud) -> float:
    """``(bbox volume / n)^(1/3)``; flat clouds fall back to ``sqrt(largest bbox face / n)``."""
    e = cloud.bounds.extent
    n = max(len(cloud), 1)
    vol = float(e[0] * e[1] * e[2])
    if vol > 0:
        return (vol / n) ** (1.0 / 3.0)
    faces = sorted(e)[1:]
    area = float(faces[0] * faces[1]) if faces[0] > 0 else float(faces[1] ** 2)
    if area <= 0:
        raise ConfigError("cannot derive an area grid for a degenerate cloud")
    return math.sqrt(area / n)


def surface_spacing(area: float, n: int) -> float:
    """Mean spacing of ``n`` points spread evenly over a surface of ``area``."""
    if not area > 0 or n < 1:
        raise ConfigError("surface area and point count must be positive")
    return math.sqrt(area / n)


def area_grid(spacing: float, count: int = DEFAULT_AREA_COUNT) -> np.ndarray:
    """``count`` areas evenly spaced from ``(2 spacing)^2`` to ``(20 spacing)^2``."""
    if not spacing > 0:
        raise ConfigError("spacing must be positive")
    return np.linspace((2 * spacing) ** 2, (20 * spacing) ** 2, count)


def default_areas(cloud: PointCloud, count: int = DEFAULT_AREA_COUNT) -> np.ndarray:
    return area_grid(expected_spacing(cloud), count)


def neighbor_counts(cloud: PointCloud, areas, rows: Optional[np.ndarray] = None, tree=None) -> np.ndarray:
    """``(len(rows), len(areas))`` counts of points within ``sqrt(a / pi)``, the point itself included."""
    pos = cloud.positions
    rows = np.arange(len(pos)) if rows is None else np.asarray(rows)
    tree = cKDTree(pos) if tree is None else tree
    out = np.empty((len(rows), len(areas)), dtype=np.int64)
    for j, a in enumerate(areas):
        out[:, j] = tree.query_ball_point(pos[rows], math.sqrt(a / math.pi), return_length=True)
    return out


def density_profile(cloud: PointCloud, areas: Optional[Sequence[float]] = None,
                    sample_size: int = DEFAULT_SAMPLE_SIZE, seed: int = 0) -> DensityProfile:
    if len(cloud) < 2:
        raise ConfigError("density profile needs at least 2 points")
    areas = default_areas(cloud) if areas is None else np.asarray(areas, dtype=np.float64)
    if len(areas) < 2:
        raise ConfigError("degenerate regression: need at least two areas")
    if np.any(areas <= 0) or np.any(np.diff(areas) <= 0):
        raise ConfigError("areas must be positive and strictly increasing")
    n = len(cloud)
    if sample_size >= n:
        rows = np.arange(n)
    else:
        rows = np.sort(np.random.default_rng(seed).choice(n, size=sample_size, replace=False))
    counts = neighbor_counts(cloud, areas, rows)
    fr = np.quantile(counts, FRACTILES, axis=0)
    reg = fit_regression(np.broadcast_to(areas, counts.shape), counts)
    return DensityProfile(areas, counts.mean(axis=0), fr, reg.slope, reg.intercept, reg.r_squared,
                          reg.rmse, len(rows))


def local_density_map(cloud: PointCloud, radius: float) -> np.ndarray:
    """Per-point neighbor count within ``radius`` (self excluded) divided by ``pi radius^2``."""
    if not radius > 0:
        raise ConfigError("radius must be positive")
    if len(cloud) == 0:
        return np.zeros(0)
    tree = cKDTree(cloud.positions)
    counts = tree.query_ball_point(cloud.positions, radius, return_length=True) - 1
    return counts / (math.pi * radius * radius)


@dataclass
class Comparison:
    ranking: list  # names, best first
    profiles: dict
    ties: list = field(default_factory=list)  # groups of names with identical (R^2, RMSE)

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(("rank", "method", "r2", "rmse", "slope", "intercept", "tied"))
        tied = {n for group in self.ties for n in group}
        for rank, name in enumerate(self.ranking, 1):
            p = self.profiles[name]
            w.writerow([rank, name, repr(p.r_squared), repr(p.rmse), repr(p.slope), repr(p.intercept),
                        "yes" if name in tied else "no"])
        return out.getvalue()

    def to_table(self) -> str:
        width = max(6, max(len(n) for n in self.ranking))
        lines = [f"{'rank':>4}  {'method':<{width}}  {'R^2':>10}  {'RMSE':>10}  {'slope':>10}"]
        for rank, name in enumerate(self.ranking, 1):
            p = self.profiles[name]
            lines.append(f"{rank:>4}  {name:<{width}}  {p.r_squared:>10.6f}  {p.rmse:>10.4f}  {p.slope:>10.4f}")
        for group in self.ties:
            lines.append("tie: " + ", ".join(group))
        return "\n".join(lines) + "\n"


def compare_profiles(profiles) -> Comparison:
    """Rank methods by R^2 (descending), then RMSE (ascending)."""
    items = list(profiles.items()) if isinstance(profiles, Mapping) else list(profiles)
    if len(items) < 2:
        raise ConfigError("need at least two profiles to compare")
    ref = items[0][1].areas
    for name, p in items:
        if len(p.areas) != len(ref) or not np.array_equal(p.areas, ref):
            raise ConfigError(f"profile {name!r} uses a different area grid")
    order = sorted(range(len(items)), key=lambda i: (-items[i][1].r_squared, items[i][1].rmse, i))
    ranking = [items[i][0] for i in order]
    ties = []
    i = 0
    while i < len(order):
        j = i + 1
        key = (items[order[i]][1].r_squared, items[order[i]][1].rmse)
        while j < len(order) and (items[order[j]][1].r_squared, items[order[j]][1].rmse) == key:
            j += 1
        if j - i > 1:
            ties.append([items[order[t]][0] for t in range(i, j)])
        i = j
    return Comparison(ranking, dict(items), ties)
