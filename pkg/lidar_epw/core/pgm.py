"""
LIDAR-EPW Polar Grid Maps
=========================

Encodes full scans into Polar Grid Maps (channels x layers x azimuth bins)
and back, one map per echo index, plus the PGM1 binary file format.

Author: LIDAR-EPW Team
"""

import logging
import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from ..errors import DataError, DimensionError, FormatError
from .frames import CLUSTER_GAP_M, DenseFrame, ScanFrame, cluster_rays
from .sensor import SensorSpec, check_class_codes

logger = logging.getLogger(__name__)

PGM_MAGIC = b"PGM1"
PGM_VERSION = 1
_HEADER = struct.Struct("<4sIIII")
_MAX_CELLS = 1 << 28


class Channel(IntEnum):
    """Semantics tag of a PGM channel."""

    DISTANCE = 0
    CLASS = 1
    EPW = 2


INPUT_CHANNELS = (Channel.DISTANCE, Channel.CLASS)


@dataclass(eq=False)
class PolarGridMap:
    """A (channels, rows, cols) grid of float64 values with per-channel semantics."""

    data: np.ndarray
    semantics: Tuple[Channel, ...] = INPUT_CHANNELS

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.semantics = tuple(Channel(int(s)) for s in self.semantics)
        if self.data.ndim != 3:
            raise DimensionError(f"PGM data must be 3-D (channels, rows, cols), got shape {self.data.shape}")
        if self.data.shape[0] != len(self.semantics):
            raise DimensionError(
                f"PGM has {self.data.shape[0]} channels but {len(self.semantics)} semantics tags"
            )

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def rows(self) -> int:
        return self.data.shape[1]

    @property
    def cols(self) -> int:
        return self.data.shape[2]

    def channel(self, semantic: Channel) -> np.ndarray:
        """The 2-D grid tagged with the given semantics."""
        try:
            return self.data[self.semantics.index(semantic)]
        except ValueError:
            raise DimensionError(f"PGM has no {semantic.name} channel") from None

    def check_spec(self, spec: SensorSpec) -> None:
        if (self.rows, self.cols) != spec.shape:
            raise DimensionError(f"PGM grid {self.rows}x{self.cols} does not match sensor grid {spec.rows}x{spec.cols}")

    def equals(self, other: "PolarGridMap") -> bool:
        return self.semantics == other.semantics and np.array_equal(self.data, other.data)


def encode(frame: ScanFrame, spec: SensorSpec, echo: int) -> PolarGridMap:
    """
    Place the points of one echo into a 2-channel (Distance, Class) map.

    Raises:
        DataError: On a duplicate point for the same (layer, az, echo)
    """
    points = frame.for_echo(echo)
    data = np.zeros((2, spec.rows, spec.cols))
    if len(points) == 0:
        return PolarGridMap(data)
    cells = points.layer * spec.cols + points.azimuth_index
    if len(np.unique(cells)) != len(cells):
        raise DataError(f"Frame {frame.frame_id}: duplicate point for the same (layer, az, echo={echo})")
    if np.any(points.layer >= spec.rows) or np.any(points.azimuth_index >= spec.cols) \
            or np.any(points.layer < 0) or np.any(points.azimuth_index < 0):
        raise DimensionError(f"Frame {frame.frame_id}: point outside the {spec.rows}x{spec.cols} grid")
    data[0, points.layer, points.azimuth_index] = points.distance
    data[1, points.layer, points.azimuth_index] = points.cls
    return PolarGridMap(data)


def encode_dense(frame: DenseFrame, spec: SensorSpec, echo: int, gap: float = CLUSTER_GAP_M) -> PolarGridMap:
    """
    Network input for one echo: cluster every ray of the dense frame and
    place the chosen echo's cluster minimum distance and majority class.
    """
    clusters = cluster_rays(frame, gap, spec.max_echoes)
    chosen = clusters.echo == echo
    data = np.zeros((2, spec.rows, spec.cols))
    layer, az = clusters.layer[chosen], clusters.azimuth_index[chosen]
    if len(layer) and (layer.max() >= spec.rows or az.max() >= spec.cols):
        raise DimensionError(f"Frame {frame.frame_id}: ray outside the {spec.rows}x{spec.cols} grid")
    data[0, layer, az] = clusters.min_distance[chosen]
    data[1, layer, az] = clusters.majority_cls[chosen]
    return PolarGridMap(data)


def encode_dense_all(frame: DenseFrame, spec: SensorSpec, gap: float = CLUSTER_GAP_M) -> Sequence[PolarGridMap]:
    """encode_dense for every echo index."""
    return [encode_dense(frame, spec, echo, gap) for echo in range(spec.max_echoes)]


def decode(
    pgm: PolarGridMap,
    epw_map: Union[np.ndarray, PolarGridMap],
    spec: SensorSpec,
    echo: int,
    frame_id: int = 0,
) -> ScanFrame:
    """
    One ScanPoint per nonzero-distance cell of a (Distance, Class) map, with
    EPW taken from epw_map (a (rows, cols) array or a 1-channel EPW map).

    Raises:
        DataError: On negative distance or EPW cells, or invalid class codes
        DimensionError: When the maps do not match the sensor grid
    """
    pgm.check_spec(spec)
    if isinstance(epw_map, PolarGridMap):
        epw_map = epw_map.channel(Channel.EPW)
    epw_map = np.asarray(epw_map, dtype=np.float64)
    if epw_map.shape != spec.shape:
        raise DimensionError(f"EPW map shape {epw_map.shape} does not match sensor grid {spec.shape}")
    distance = pgm.channel(Channel.DISTANCE)
    cls = pgm.channel(Channel.CLASS)
    if np.any(distance < 0):
        raise DataError("PGM distance channel holds negative cells")
    if np.any(epw_map < 0):
        raise DataError("EPW map holds negative cells")
    layer, az = np.nonzero(distance)
    codes = cls[layer, az]
    if np.any(codes != np.round(codes)):
        raise DataError("PGM class channel holds non-integer codes")
    codes = codes.astype(np.int64)
    check_class_codes(codes)
    return ScanFrame(
        frame_id, layer, az, np.full(len(layer), echo), distance[layer, az], epw_map[layer, az], codes,
    )


def write_pgm(path: Union[str, Path], pgm: PolarGridMap) -> None:
    """Write a PGM1 file; values are stored as little-endian float32."""
    header = _HEADER.pack(PGM_MAGIC, PGM_VERSION, pgm.channels, pgm.rows, pgm.cols)
    tags = bytes(int(s) for s in pgm.semantics)
    payload = np.ascontiguousarray(pgm.data, dtype="<f4").tobytes()
    Path(path).write_bytes(header + tags + payload)


def read_pgm(path: Union[str, Path]) -> PolarGridMap:
    """
    Read a PGM1 file.

    Raises:
        FormatError: On a bad magic, unsupported version, truncated file,
            oversized dimensions or a payload that does not match the header
    """
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated PGM header")
    magic, version, channels, rows, cols = _HEADER.unpack_from(raw)
    if magic != PGM_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {PGM_MAGIC!r}")
    if version != PGM_VERSION:
        raise FormatError(f"{path}: unsupported PGM version {version}")
    cells = channels * rows * cols
    if channels == 0 or cells > _MAX_CELLS:
        raise FormatError(f"{path}: invalid PGM dimensions {channels}x{rows}x{cols}")
    offset = _HEADER.size + channels
    if len(raw) < offset:
        raise FormatError(f"{path}: truncated semantics block")
    try:
        semantics = tuple(Channel(b) for b in raw[_HEADER.size:offset])
    except ValueError as e:
        raise FormatError(f"{path}: unknown channel semantics tag") from e
    if len(raw) - offset != 4 * cells:
        raise FormatError(f"{path}: payload holds {len(raw) - offset} bytes, header declares {4 * cells}")
    data = np.frombuffer(raw, dtype="<f4", offset=offset).astype(np.float64).reshape(channels, rows, cols)
    return PolarGridMap(data, semantics)


def stack_inputs(maps: Sequence[PolarGridMap], spec: Optional[SensorSpec] = None) -> np.ndarray:
    """Stack (Distance, Class) maps into a (batch, 2, rows, cols) array."""
    if not maps:
        raise DataError("No maps to stack")
    shapes = {m.data.shape for m in maps}
    if len(shapes) != 1:
        raise DimensionError(f"Maps of differing shapes cannot be stacked: {sorted(shapes)}")
    if spec is not None:
        maps[0].check_spec(spec)
    return np.stack([np.stack([m.channel(Channel.DISTANCE), m.channel(Channel.CLASS)]) for m in maps])
