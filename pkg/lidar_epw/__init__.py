"""
LIDAR-EPW: LiDAR Echo Pulse Width Sensor Model
==============================================

Turns ideal, densely annotated synthetic point clouds into realistic scans
carrying Echo Pulse Width values and learned echo-occurrence behavior.

Features:
- Synthetic scenes with a beam-footprint raycaster and a reference EPW oracle
- Polar grid map encoding of full scans
- Lookup-table and fully-convolutional EPW models (six network variants)
- Histogram-based one-out-of-many echo selection
- Distribution-comparison KPI suite
- Command line tools and a newline-delimited JSON TCP service

Author: LIDAR-EPW Team
"""

__version__ = "1.0.0"
__author__ = "LIDAR-EPW Team"

from .errors import (
    AngleRangeError,
    CheckpointError,
    ConfigurationError,
    DataError,
    DimensionError,
    DomainError,
    FitError,
    FormatError,
    LidarEpwError,
    UsageError,
)

__all__ = [
    "__version__",
    "LidarEpwError",
    "UsageError",
    "ConfigurationError",
    "DomainError",
    "AngleRangeError",
    "DataError",
    "FormatError",
    "DimensionError",
    "FitError",
    "CheckpointError",
]
