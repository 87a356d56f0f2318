"""
LIDAR-EPW Sensor Geometry
=========================

Angular geometry of the scanner and the object class labels.

The grid convention is image-like: row 0 is the topmost layer (highest
altitude), column 0 the leftmost azimuth bin (h_fov minimum). Angle
intervals are half-open, [min, max), so binning is total.

Author: LIDAR-EPW Team
"""

import math
from dataclasses import asdict, dataclass
from enum import IntEnum
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np

from ..config import read_mapping, require_keys
from ..errors import AngleRangeError, ConfigurationError, DataError

NUM_CLASSES = 6
MAX_ECHOES = 3


class ClassLabel(IntEnum):
    """Annotated object classes, with stable integer codes."""

    NONE = 0
    CAR = 1
    TRUCK = 2
    PEDESTRIAN = 3
    MOTORBIKE = 4
    HIGH_REFLECTIVE = 5

    @classmethod
    def from_code(cls, code: Any) -> "ClassLabel":
        """Decode an integer class code, rejecting anything outside 0..5."""
        try:
            value = int(code)
        except (TypeError, ValueError) as e:
            raise DataError(f"Invalid class code {code!r}") from e
        if isinstance(code, float) and not code.is_integer():
            raise DataError(f"Class code {code!r} is not an integer")
        if not 0 <= value < NUM_CLASSES:
            raise DataError(f"Class code {value} out of range 0..{NUM_CLASSES - 1}")
        return cls(value)


def check_class_codes(codes: np.ndarray) -> None:
    """Raise DataError unless every code is an integer in 0..5."""
    codes = np.asarray(codes)
    if codes.size == 0:
        return
    if np.any(codes < 0) or np.any(codes >= NUM_CLASSES) or np.any(codes != np.round(codes)):
        raise DataError(f"Class codes must be integers in 0..{NUM_CLASSES - 1}")


@dataclass(frozen=True)
class SensorSpec:
    """
    Angular geometry of a multi-layer, multi-echo scanner.

    Defaults describe a 16 layer, 145 degree scanner with 0.625 x 0.125
    degree resolution and three echoes per pulse.
    """

    n_layers: int = 16
    v_fov: Tuple[float, float] = (-5.0, 5.0)
    v_res: float = 0.625
    h_fov: Tuple[float, float] = (-72.5, 72.5)
    h_res: float = 0.125
    max_echoes: int = MAX_ECHOES
    max_range: float = 150.0

    def __post_init__(self):
        object.__setattr__(self, "v_fov", tuple(float(v) for v in self.v_fov))
        object.__setattr__(self, "h_fov", tuple(float(v) for v in self.h_fov))
        if self.n_layers < 1:
            raise ConfigurationError("n_layers must be positive")
        if self.v_res <= 0 or self.h_res <= 0:
            raise ConfigurationError("Resolutions must be positive")
        if self.v_fov[0] >= self.v_fov[1] or self.h_fov[0] >= self.h_fov[1]:
            raise ConfigurationError("FOV bounds must be ascending")
        v_span = self.v_fov[1] - self.v_fov[0]
        if not math.isclose(self.n_layers * self.v_res, v_span, rel_tol=0, abs_tol=1e-9):
            raise ConfigurationError(
                f"n_layers * v_res = {self.n_layers * self.v_res} must equal the vertical span {v_span}"
            )
        ratio = (self.h_fov[1] - self.h_fov[0]) / self.h_res
        if not math.isclose(ratio, round(ratio), rel_tol=0, abs_tol=1e-9):
            raise ConfigurationError(f"Horizontal span / h_res = {ratio} is not an integer")
        if self.max_echoes != MAX_ECHOES:
            raise ConfigurationError(f"max_echoes must be {MAX_ECHOES}")
        if self.max_range <= 0:
            raise ConfigurationError("max_range must be positive")

    @property
    def rows(self) -> int:
        return self.n_layers

    @property
    def cols(self) -> int:
        return int(round((self.h_fov[1] - self.h_fov[0]) / self.h_res))

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.rows, self.cols)

    @classmethod
    def desk(cls) -> "SensorSpec":
        """Reduced azimuth resolution (0.625 deg, 232 columns) used for training."""
        return cls(h_res=0.625)

    @classmethod
    def from_dict(cls, content: Dict[str, Any]) -> "SensorSpec":
        require_keys(content, {f for f in cls.__dataclass_fields__}, "sensor spec")
        try:
            return cls(**content)
        except TypeError as e:
            raise ConfigurationError(f"Invalid sensor spec: {e}") from e

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "SensorSpec":
        """Load a sensor-spec JSON file whose fields mirror this class."""
        return cls.from_dict(read_mapping(path))

    def to_dict(self) -> Dict[str, Any]:
        content = asdict(self)
        content["v_fov"] = list(self.v_fov)
        content["h_fov"] = list(self.h_fov)
        return content


def angle_to_cell(spec: SensorSpec, azimuth: float, altitude: float) -> Tuple[int, int]:
    """
    Map an (azimuth, altitude) direction in degrees to its (row, col) cell.

    Raises:
        AngleRangeError: If the angle lies outside [min, max) of either FOV
    """
    h_min, h_max = spec.h_fov
    v_min, v_max = spec.v_fov
    if not h_min <= azimuth < h_max:
        raise AngleRangeError(f"Azimuth {azimuth} outside [{h_min}, {h_max})")
    if not v_min <= altitude < v_max:
        raise AngleRangeError(f"Altitude {altitude} outside [{v_min}, {v_max})")
    col = min(int(math.floor((azimuth - h_min) / spec.h_res)), spec.cols - 1)
    # altitude == v_min lands one past the last row
    row = min(int(math.floor((v_max - altitude) / spec.v_res)), spec.rows - 1)
    return row, col


def cell_to_angle(spec: SensorSpec, row: int, col: int) -> Tuple[float, float]:
    """Return the bin-center (azimuth, altitude) of a cell, in degrees."""
    if not (0 <= row < spec.rows and 0 <= col < spec.cols):
        raise AngleRangeError(f"Cell ({row}, {col}) outside {spec.rows}x{spec.cols} grid")
    azimuth = spec.h_fov[0] + (col + 0.5) * spec.h_res
    altitude = spec.v_fov[1] - (row + 0.5) * spec.v_res
    return azimuth, altitude


def azimuth_centers(spec: SensorSpec) -> np.ndarray:
    """Bin-center azimuth of every column, degrees."""
    return spec.h_fov[0] + (np.arange(spec.cols) + 0.5) * spec.h_res


def altitude_centers(spec: SensorSpec) -> np.ndarray:
    """Bin-center altitude of every row, degrees."""
    return spec.v_fov[1] - (np.arange(spec.rows) + 0.5) * spec.v_res


def ray_directions(spec: SensorSpec) -> np.ndarray:
    """
    Unit direction of every cell center, shape (rows, cols, 3).

    Boresight is +x, azimuth grows toward +y, altitude toward +z.
    """
    az = np.radians(azimuth_centers(spec))[None, :]
    alt = np.radians(altitude_centers(spec))[:, None]
    return np.stack(
        np.broadcast_arrays(np.cos(alt) * np.cos(az), np.cos(alt) * np.sin(az), np.sin(alt)),
        axis=-1,
    )


def to_cartesian(
    spec: SensorSpec, layer: np.ndarray, azimuth_index: np.ndarray, distance: np.ndarray
) -> np.ndarray:
    """Convert scan points (cell indices + range) to sensor-frame xyz, shape (n, 3)."""
    az = np.radians(azimuth_centers(spec)[np.asarray(azimuth_index, dtype=int)])
    alt = np.radians(altitude_centers(spec)[np.asarray(layer, dtype=int)])
    distance = np.asarray(distance, dtype=float)
    return np.stack(
        [
            distance * np.cos(alt) * np.cos(az),
            distance * np.cos(alt) * np.sin(az),
            distance * np.sin(alt),
        ],
        axis=-1,
    )
