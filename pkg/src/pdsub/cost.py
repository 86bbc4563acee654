"""Per-sample ranking functions.

A point's cost grows with how crowded its neighborhood is; the decimator removes
high-cost points first. All k-NN based kinds are sums, over the first k valid
neighbors, of a per-neighbor *contribution*. The contribution helpers below are
vectorized so the decimator can store them once and re-sum after removals.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError
from .neighborhood import Neighbor, NeighborCache

DEFAULT_EPSILON = 1e-6
DEFAULT_SIGMA_C = 0.2


class CostKind(enum.Enum):
    K1 = "k1"
    KNN = "knn"
    KNN_NORMAL = "normal"
    KNN_COLOR = "color"
    YUKSEL = "yuksel"

    @classmethod
    def parse(cls, value) -> "CostKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            names = ", ".join(k.value for k in cls)
            raise ConfigError(f"unknown cost kind {value!r} (expected one of {names})") from None


@dataclass(frozen=True)
class YukselParams:
    alpha: float = 8.0
    beta: float = 0.65
    gamma: float = 1.5
    lam: float = 0.1
    volume: Optional[float] = None
    current_count: Optional[int] = None

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("beta must lie in [0, 1]")
        if not 0.0 < self.lam < 1.0:
            raise ConfigError("lambda must lie in (0, 1)")

    def radius(self) -> float:
        if self.volume is None or self.current_count is None:
            raise ConfigError("volume and current_count are required for the Yuksel radius")
        return yuksel_radius(self.volume, self.current_count)

    def r_min(self, r: Optional[float] = None) -> float:
        return yuksel_rmin(self.radius() if r is None else r, self.lam, self.gamma, self.beta)


@dataclass(frozen=True)
class CostConfig:
    kind: CostKind = CostKind.KNN
    k: int = 6
    epsilon_d: float = DEFAULT_EPSILON
    sigma_c: float = DEFAULT_SIGMA_C
    yuksel: YukselParams = field(default_factory=YukselParams)

    def __post_init__(self):
        object.__setattr__(self, "kind", CostKind.parse(self.kind))
        if int(self.k) != self.k or self.k < 1:
            raise ConfigError(f"k must be a positive integer, got {self.k}")
        if not self.epsilon_d > 0:
            raise ConfigError("epsilon_d must be positive")
        if not self.sigma_c > 0:
            raise ConfigError("sigma_c must be positive")

    @property
    def effective_k(self) -> int:
        return 1 if self.kind is CostKind.K1 else int(self.k)


@dataclass(frozen=True, order=True)
class CostValue:
    """A cost with its removal order: larger ``(value, id)`` is removed first."""

    value: float
    id: int

    def __post_init__(self):
        if not (self.value >= 0 and math.isfinite(self.value)):
            raise ConfigError(f"cost must be finite and non-negative, got {self.value}")


# -- Yuksel geometry --------------------------------------------------------

def yuksel_radius(volume: float, count: int) -> float:
    """Maximal Poisson-disk radius for ``count`` samples in a 3-D domain of ``volume``."""
    if not volume > 0:
        raise ConfigError("sampling-domain volume must be positive")
    if count <= 0:
        raise ConfigError("sample count must be positive")
    return 2.0 * (volume / (4.0 * math.sqrt(2.0) * count)) ** (1.0 / 3.0)


def yuksel_rmin(r: float, lam: float, gamma: float = 1.5, beta: float = 0.65) -> float:
    return r * (1.0 - lam ** gamma) * beta


# -- vectorized contributions ----------------------------------------------

def inverse_square(d, eps: float = DEFAULT_EPSILON):
    d = np.maximum(np.asarray(d, dtype=np.float64), eps)
    return 1.0 / (d * d)


def normal_weight(n_p, n_q):
    """Clamped cosine between normals; broadcasts over leading axes."""
    n_p = np.asarray(n_p, dtype=np.float64)
    n_q = np.asarray(n_q, dtype=np.float64)
    dot = n_p[..., 0] * n_q[..., 0] + n_p[..., 1] * n_q[..., 1] + n_p[..., 2] * n_q[..., 2]
    return np.maximum(dot, 0.0)


def color_weight(c_p, c_q, sigma_c: float = DEFAULT_SIGMA_C, normalized: bool = False):
    """Gaussian color similarity; 8-bit colors are scaled to [0, 1] unless ``normalized``."""
    scale = 1.0 if normalized else 1.0 / 255.0
    diff = (np.asarray(c_p, dtype=np.float64) - np.asarray(c_q, dtype=np.float64)) * scale
    sq = np.sum(diff * diff, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        w = np.exp(-sq / (sigma_c * sigma_c))
    return np.where(sq == 0.0, 1.0, w)


def yuksel_weight(d, r: float, r_min: float, alpha: float):
    d = np.asarray(d, dtype=np.float64)
    d_hat = np.where(d <= r_min, r_min, d)
    return np.where(d < r, (1.0 - d_hat / r) ** alpha, 0.0)


def sum_first_k(contrib: np.ndarray, valid: np.ndarray, k: int) -> np.ndarray:
    """Row sums of the first ``k`` valid entries, accumulated left to right."""
    contrib = np.atleast_2d(contrib)
    valid = np.atleast_2d(valid)
    take = valid & (np.cumsum(valid, axis=1) <= k)
    total = np.zeros(len(contrib))
    for j in range(contrib.shape[1]):
        total += np.where(take[:, j], contrib[:, j], 0.0)
    return total


# -- per-cache API ----------------------------------------------------------

def _first(cache: NeighborCache, k: int):
    sel = np.flatnonzero(cache.valid)[:k]
    return cache.ids[sel], cache.dists[sel]


def cost_k1(cache: NeighborCache, epsilon_d: float = DEFAULT_EPSILON) -> float:
    return cost_knn(cache, 1, epsilon_d)


def cost_knn(cache: NeighborCache, k: int, epsilon_d: float = DEFAULT_EPSILON) -> float:
    _, d = _first(cache, k)
    total = 0.0
    for w in inverse_square(d, epsilon_d):
        total += w
    return float(total)


def _lookup(table, pid: int, what: str):
    try:
        value = table[pid]
    except (KeyError, IndexError, TypeError):
        raise ConfigError(f"point {pid} has no {what}") from None
    if value is None:
        raise ConfigError(f"point {pid} has no {what}")
    return np.asarray(value, dtype=np.float64)


def cost_knn_normal(cache: NeighborCache, normals, k: int, epsilon_d: float = DEFAULT_EPSILON) -> float:
    """``normals`` maps point id to unit normal and must cover the owner and its neighbors."""
    ids, d = _first(cache, k)
    n_p = _lookup(normals, cache.owner, "normal")
    total = 0.0
    for pid, w in zip(ids, inverse_square(d, epsilon_d)):
        total += float(normal_weight(n_p, _lookup(normals, int(pid), "normal"))) * w
    return total


def cost_knn_color(cache: NeighborCache, colors, k: int, epsilon_d: float = DEFAULT_EPSILON,
                   sigma_c: float = DEFAULT_SIGMA_C, normalized: bool = False) -> float:
    """``colors`` maps point id to an RGB triple (8-bit unless ``normalized``)."""
    ids, d = _first(cache, k)
    c_p = _lookup(colors, cache.owner, "color")
    total = 0.0
    for pid, w in zip(ids, inverse_square(d, epsilon_d)):
        total += float(color_weight(c_p, _lookup(colors, int(pid), "color"), sigma_c, normalized)) * w
    return total


def yuksel_cost(neighbors_within_r: Sequence[Neighbor], config: CostConfig | YukselParams,
                r: Optional[float] = None) -> float:
    """Yuksel's elimination weight; ``r`` defaults to the radius implied by the parameters."""
    params = config.yuksel if isinstance(config, CostConfig) else config
    r = params.radius() if r is None else r
    r_min = params.r_min(r)
    d = np.array([nb.dist for nb in neighbors_within_r], dtype=np.float64)
    total = 0.0
    for w in yuksel_weight(d, r, r_min, params.alpha):
        total += w
    return float(total)


def cache_cost(cache: NeighborCache, config: CostConfig, normals=None, colors=None) -> float:
    """Dispatch on ``config.kind`` for a single cache (Yuksel uses the first k buffered neighbors within r)."""
    kind = config.kind
    if kind is CostKind.K1:
        return cost_k1(cache, config.epsilon_d)
    if kind is CostKind.KNN:
        return cost_knn(cache, config.k, config.epsilon_d)
    if kind is CostKind.KNN_NORMAL:
        if normals is None:
            raise ConfigError("normal-weighted cost needs normals")
        return cost_knn_normal(cache, normals, config.k, config.epsilon_d)
    if kind is CostKind.KNN_COLOR:
        if colors is None:
            raise ConfigError("color-weighted cost needs colors")
        return cost_knn_color(cache, colors, config.k, config.epsilon_d, config.sigma_c)
    return yuksel_cost(cache.first_k_valid(config.k), config)
