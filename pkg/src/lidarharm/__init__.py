"""lidarharm: intensity harmonization for overlapping LiDAR scans."""

__version__ = "0.1.0"

from .pointcloud import Point, Scan, SpatialIndex, build_index, query_knn, overlap_count
from .response import ResponseFunction, ShiftParams, apply, invert, shift_multiplier, corrupt_scan

__all__ = [
    "__version__",
    "Point",
    "Scan",
    "SpatialIndex",
    "build_index",
    "query_knn",
    "overlap_count",
    "ResponseFunction",
    "ShiftParams",
    "apply",
    "invert",
    "shift_multiplier",
    "corrupt_scan",
]
