"""Out-of-core Poisson-disk subsampling of point clouds."""
from .core import Aabb, PointCloud, PointRecord, distance, min_pairwise_distance
from .cost import CostConfig, CostKind, YukselParams
from .decimator import DecimationReport, decimate, resume, target_count
from .errors import ConfigError, DataError, InvariantViolation, PdsubError, StoreCorruptionError
from .voxel_store import VoxelStore

__all__ = [
    "Aabb", "PointCloud", "PointRecord", "distance", "min_pairwise_distance",
    "CostConfig", "CostKind", "YukselParams",
    "DecimationReport", "decimate", "resume", "target_count",
    "ConfigError", "DataError", "InvariantViolation", "PdsubError", "StoreCorruptionError",
    "VoxelStore",
]
