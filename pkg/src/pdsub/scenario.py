"""The reference cube experiment: a 10 m cube scanned from inside.

Every ray of an interior scanner hits one of the six faces, so the scanned area is
the full face area (600 m^2 for side 10), which is what density estimates are
compared against.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .analysis import DEFAULT_AREA_COUNT, area_grid, surface_spacing
from .core import PointCloud
from .scan_sim import DEFAULT_RANGE_SIGMA, ScannerSpec, make_cube_mesh, multi_scan


@dataclass(frozen=True)
class CubeScenario:
    side: float = 10.0
    n_poses: int = 8
    points: int = 50_000
    sigma: float = DEFAULT_RANGE_SIGMA
    seed: int = 1
    # poses are kept this far from every wall
    margin: float = 1.5

    @property
    def scanned_area(self) -> float:
        return 6.0 * self.side * self.side

    def area_grid(self, n: int, count: int = DEFAULT_AREA_COUNT) -> np.ndarray:
        """Analysis areas matched to ``n`` points spread over the scanned faces."""
        return area_grid(surface_spacing(self.scanned_area, n), count)

    def angular_step(self) -> float:
        """Step giving about ``points / n_poses`` rays over the full sphere per pose."""
        rays = self.points / self.n_poses
        return math.sqrt(2.0 * math.pi * math.pi / rays)

    def poses(self) -> list:
        rng = np.random.default_rng(self.seed)
        h = self.side / 2.0 - self.margin
        return [tuple(p) for p in rng.uniform(-h, h, size=(self.n_poses, 3))]

    def specs(self) -> list:
        step = self.angular_step()
        return [ScannerSpec(p, step, step, (-math.pi / 2, math.pi / 2), self.sigma, math.inf, self.seed * 1000 + i)
                for i, p in enumerate(self.poses())]

    def mesh(self):
        return make_cube_mesh(self.side, inward=True)

    def simulate(self) -> PointCloud:
        return multi_scan(self.mesh(), self.specs())
