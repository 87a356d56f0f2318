"""
LIDAR-EPW Errors
================

Exception hierarchy shared by every module of the sensor model.
The CLI maps each family to a process exit code.

Author: LIDAR-EPW Team
"""


class LidarEpwError(Exception):
    """Base class for all errors raised by the sensor model."""

    exit_code = 3


class UsageError(LidarEpwError):
    """Invalid command line usage."""

    exit_code = 1


class ConfigurationError(LidarEpwError, ValueError):
    """Invalid scene, sensor or training configuration."""

    exit_code = 2


class DomainError(LidarEpwError, ValueError):
    """Function argument outside its mathematical domain."""

    exit_code = 2


class AngleRangeError(LidarEpwError, ValueError):
    """Angle or query outside the covered field of view / bin range."""

    exit_code = 2


class DataError(LidarEpwError, ValueError):
    """Input data violates a structural invariant."""

    exit_code = 2


class FormatError(DataError):
    """Malformed file: bad magic, truncated payload, size mismatch."""


class DimensionError(DataError):
    """Array or grid dimensions do not match."""


class FitError(DataError):
    """A model could not be fitted from the given data."""


class CheckpointError(DataError):
    """Missing or incompatible model checkpoint."""
