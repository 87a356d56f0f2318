"""
LIDAR-EPW Lookup-Table Model
============================

Histogram lookup table of EPW statistics per (class, echo, distance bin,
yaw bin), optionally split by layer. Bins keep streaming moments
(count, mean, M2) so tables fitted on shards merge exactly.

Author: LIDAR-EPW Team
"""

import csv
import io
import logging
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, List, Optional, Tuple, Union

import numpy as np

from ..errors import AngleRangeError, ConfigurationError, FitError, FormatError
from .frames import ScanFrame
from .sensor import MAX_ECHOES, NUM_CLASSES, ClassLabel, SensorSpec, azimuth_centers

logger = logging.getLogger(__name__)

LUT_MAGIC = b"LUT1"
LUT_VERSION = 1
_LUT_HEADER = struct.Struct("<4sIBIII")
_BIN_DTYPE = np.dtype([("count", "<u8"), ("mean", "<f8"), ("m2", "<f8")])
REPORT_HEADER = ["class", "echo", "distance_lo", "distance_hi", "yaw_lo", "yaw_hi", "count", "mean_ns", "std_ns"]


class QueryMode(Enum):
    MEAN = "mean"
    SAMPLE = "sample"


@dataclass(frozen=True)
class LutBins:
    """Bin edges of the table; use_layer adds the layer axis."""

    distance_edges: Tuple[float, ...] = tuple(np.arange(0.0, 150.0 + 5.0, 5.0))
    yaw_edges: Tuple[float, ...] = tuple(np.arange(-72.5, 72.5 + 5.0, 5.0))
    use_layer: bool = False
    n_layers: int = 16

    def __post_init__(self):
        for name in ("distance_edges", "yaw_edges"):
            edges = tuple(float(v) for v in getattr(self, name))
            if len(edges) < 2 or np.any(np.diff(edges) <= 0):
                raise ConfigurationError(f"{name} must hold at least 2 strictly ascending values")
            object.__setattr__(self, name, edges)
        if self.n_layers < 1:
            raise ConfigurationError("n_layers must be >= 1")

    @classmethod
    def covering(cls, spec: SensorSpec, distance_step: float = 5.0, yaw_step: float = 5.0,
                 use_layer: bool = False) -> "LutBins":
        """Edges spanning [0, max_range] and the horizontal FOV; the last bin may be narrower."""
        return cls(
            _edges(0.0, spec.max_range, distance_step),
            _edges(spec.h_fov[0], spec.h_fov[1], yaw_step),
            use_layer=use_layer,
            n_layers=spec.n_layers,
        )

    @property
    def shape(self) -> Tuple[int, int, int, int, int]:
        layers = self.n_layers if self.use_layer else 1
        return (NUM_CLASSES, MAX_ECHOES, layers, len(self.distance_edges) - 1, len(self.yaw_edges) - 1)

    def distance_bin(self, distance: np.ndarray) -> np.ndarray:
        return _bin_index(self.distance_edges, distance, "distance")

    def yaw_bin(self, yaw: np.ndarray) -> np.ndarray:
        return _bin_index(self.yaw_edges, yaw, "yaw")

    def layer_bin(self, layer: Optional[np.ndarray], size: int) -> np.ndarray:
        if not self.use_layer:
            return np.zeros(size, dtype=np.int64)
        if layer is None:
            raise AngleRangeError("This table is split by layer; a layer index is required")
        layer = np.broadcast_to(np.asarray(layer, dtype=np.int64), (size,))
        if np.any(layer < 0) or np.any(layer >= self.n_layers):
            raise AngleRangeError(f"layer outside 0..{self.n_layers - 1}")
        return layer


def _edges(low: float, high: float, step: float) -> Tuple[float, ...]:
    if step <= 0:
        raise ConfigurationError("Bin step must be positive")
    edges = list(np.arange(low, high, step))
    if not np.isclose(edges[-1], high):
        edges.append(high)
    else:
        edges[-1] = high
    return tuple(edges) if len(edges) > 1 else (low, high)


def _bin_index(edges: Tuple[float, ...], values: np.ndarray, name: str) -> np.ndarray:
    """Half-open bins [e_i, e_i+1); the upper edge belongs to the last bin."""
    values = np.atleast_1d(np.asarray(values, dtype=np.float64))
    if np.any(~((values >= edges[0]) & (values <= edges[-1]))):
        raise AngleRangeError(f"{name} outside the table coverage [{edges[0]}, {edges[-1]}]")
    index = np.searchsorted(edges, values, side="right") - 1
    return np.minimum(index, len(edges) - 2)


@dataclass(eq=False)
class EpwLut:
    """Per-bin EPW moments; arrays have shape bins.shape."""

    bins: LutBins
    count: np.ndarray = None
    mean: np.ndarray = None
    m2: np.ndarray = None
    _fallback: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        shape = self.bins.shape
        self.count = np.zeros(shape, dtype=np.int64) if self.count is None else np.asarray(self.count, dtype=np.int64)
        self.mean = np.zeros(shape) if self.mean is None else np.asarray(self.mean, dtype=np.float64)
        self.m2 = np.zeros(shape) if self.m2 is None else np.asarray(self.m2, dtype=np.float64)
        if any(a.shape != shape for a in (self.count, self.mean, self.m2)):
            raise FormatError(f"LUT arrays do not match the bin layout {shape}")

    @property
    def variance(self) -> np.ndarray:
        """M2/count per bin; NaN where count < 2."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.count >= 2, self.m2 / np.maximum(self.count, 1), np.nan)

    @property
    def non_empty(self) -> int:
        return int(np.count_nonzero(self.count))

    def update(self, frame: ScanFrame, spec: SensorSpec) -> int:
        """
        Fold one frame into the table (Chan's parallel moment update).

        Points outside the table coverage are skipped.

        Returns:
            int: Number of points folded in
        """
        if len(frame) == 0:
            return 0
        yaw = azimuth_centers(spec)[frame.azimuth_index]
        edges_d, edges_y = self.bins.distance_edges, self.bins.yaw_edges
        inside = (
            (frame.distance >= edges_d[0]) & (frame.distance <= edges_d[-1])
            & (yaw >= edges_y[0]) & (yaw <= edges_y[-1]) & (frame.echo < MAX_ECHOES)
        )
        if not np.all(inside):
            logger.debug(f"Frame {frame.frame_id}: {int((~inside).sum())} points outside LUT coverage skipped")
        if not np.any(inside):
            return 0
        flat = np.ravel_multi_index(
            (
                frame.cls[inside],
                frame.echo[inside],
                self.bins.layer_bin(frame.layer[inside], int(inside.sum())),
                self.bins.distance_bin(frame.distance[inside]),
                self.bins.yaw_bin(yaw[inside]),
            ),
            self.bins.shape,
        )
        self._fold(flat, frame.epw[inside])
        return int(inside.sum())

    def _fold(self, flat: np.ndarray, values: np.ndarray) -> None:
        size = self.count.size
        n_b = np.bincount(flat, minlength=size)
        sums = np.bincount(flat, weights=values, minlength=size)
        touched = n_b > 0
        mean_b = np.zeros(size)
        mean_b[touched] = sums[touched] / n_b[touched]
        m2_b = np.bincount(flat, weights=(values - mean_b[flat]) ** 2, minlength=size)
        self._combine(n_b.reshape(self.bins.shape), mean_b.reshape(self.bins.shape), m2_b.reshape(self.bins.shape))

    def _combine(self, n_b: np.ndarray, mean_b: np.ndarray, m2_b: np.ndarray) -> None:
        n_a = self.count
        total = n_a + n_b
        safe = np.maximum(total, 1)
        delta = mean_b - self.mean
        self.mean = np.where(total > 0, self.mean + delta * n_b / safe, 0.0)
        self.m2 = self.m2 + m2_b + delta ** 2 * n_a * n_b / safe
        self.count = total
        self._fallback = None

    def merge(self, other: "EpwLut") -> "EpwLut":
        """Table equivalent to fitting both source traces together."""
        if other.bins != self.bins:
            raise ConfigurationError("Cannot merge tables with different bin layouts")
        merged = EpwLut(self.bins, self.count.copy(), self.mean.copy(), self.m2.copy())
        merged._combine(other.count, other.mean, other.m2)
        return merged

    def fallback_index(self) -> np.ndarray:
        """
        Per bin, the nearest non-empty distance bin of the same
        (class, echo, layer, yaw) row; -1 if the row is empty. The lower
        distance bin wins a tie.
        """
        if self._fallback is None:
            filled = np.moveaxis(self.count > 0, 3, -1)
            n_dist = filled.shape[-1]
            gaps = np.abs(np.arange(n_dist)[:, None] - np.arange(n_dist)[None, :]).astype(np.float64)
            cost = np.where(filled[..., None, :], gaps, np.inf)
            nearest = np.argmin(cost, axis=-1)
            nearest = np.where(filled.any(axis=-1)[..., None], nearest, -1)
            self._fallback = np.moveaxis(nearest, -1, 3)
        return self._fallback


def fit_lut(trace: Iterable[ScanFrame], bins: LutBins, spec: SensorSpec) -> EpwLut:
    """
    Fit the table in a single streaming pass over the trace.

    Raises:
        FitError: If the trace holds no points
    """
    lut = EpwLut(bins)
    frames = points = 0
    for frame in trace:
        frames += 1
        points += lut.update(frame, spec)
    if points == 0:
        raise FitError(f"Cannot fit a lookup table on an empty trace ({frames} frames, 0 points)")
    logger.info(f"Fitted EPW lookup table on {points} points from {frames} frames ({lut.non_empty} non-empty bins)")
    return lut


def query_lut(
    lut: EpwLut,
    cls: int,
    echo: int,
    distance: float,
    yaw: float,
    mode: QueryMode = QueryMode.MEAN,
    rng: Optional[np.random.Generator] = None,
    layer: Optional[int] = None,
) -> Optional[float]:
    """
    Query one bin.

    Returns:
        Optional[float]: Bin mean (Mean mode) or a Gaussian draw clipped at 0
        (Sample mode, variance 0 when count < 2); None for an empty bin

    Raises:
        AngleRangeError: When distance or yaw fall outside the table coverage
    """
    index = _cell(lut, cls, echo, distance, yaw, layer)
    if lut.count[index] == 0:
        return None
    return _draw(lut, index, mode, rng)


def lookup_epw(
    lut: EpwLut,
    cls: int,
    echo: int,
    distance: float,
    yaw: float,
    mode: QueryMode = QueryMode.MEAN,
    rng: Optional[np.random.Generator] = None,
    layer: Optional[int] = None,
) -> float:
    """Total variant of query_lut: empty bins fall back to the nearest non-empty distance bin, else 0."""
    index = _cell(lut, cls, echo, distance, yaw, layer)
    nearest = lut.fallback_index()[index]
    if nearest < 0:
        return 0.0
    return _draw(lut, index[:3] + (int(nearest),) + index[4:], mode, rng)


def _cell(lut: EpwLut, cls: int, echo: int, distance: float, yaw: float, layer: Optional[int]) -> Tuple[int, ...]:
    ClassLabel.from_code(cls)
    if not 0 <= echo < MAX_ECHOES:
        raise AngleRangeError(f"echo index {echo} outside 0..{MAX_ECHOES - 1}")
    return (
        int(cls), int(echo),
        int(lut.bins.layer_bin(None if layer is None else [layer], 1)[0]),
        int(lut.bins.distance_bin(distance)[0]),
        int(lut.bins.yaw_bin(yaw)[0]),
    )


def _draw(lut: EpwLut, index: Tuple[int, ...], mode: QueryMode, rng: Optional[np.random.Generator]) -> float:
    mean = float(lut.mean[index])
    if QueryMode(mode) == QueryMode.MEAN:
        return mean
    if rng is None:
        raise ConfigurationError("Sample mode needs a random generator")
    variance = lut.variance[index]
    std = 0.0 if np.isnan(variance) else float(np.sqrt(variance))
    return max(0.0, float(rng.normal(mean, std)))


def predict_epw(
    lut: EpwLut,
    cls: np.ndarray,
    echo: np.ndarray,
    distance: np.ndarray,
    yaw: np.ndarray,
    layer: Optional[np.ndarray] = None,
    mode: QueryMode = QueryMode.MEAN,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Vectorized lookup_epw over aligned arrays; out-of-coverage distances clamp to the last bin."""
    distance = np.clip(np.asarray(distance, dtype=np.float64), lut.bins.distance_edges[0], lut.bins.distance_edges[-1])
    cls = np.asarray(cls, dtype=np.int64)
    n = len(cls)
    if n == 0:
        return np.zeros(0)
    echo = np.broadcast_to(np.asarray(echo, dtype=np.int64), (n,))
    layer_index = lut.bins.layer_bin(layer, n)
    d_bin = lut.bins.distance_bin(distance)
    y_bin = lut.bins.yaw_bin(yaw)
    nearest = lut.fallback_index()[cls, echo, layer_index, d_bin, y_bin]
    found = nearest >= 0
    source = (cls, echo, layer_index, np.where(found, nearest, 0), y_bin)
    mean = np.where(found, lut.mean[source], 0.0)
    if QueryMode(mode) == QueryMode.MEAN:
        return mean
    if rng is None:
        raise ConfigurationError("Sample mode needs a random generator")
    std = np.sqrt(np.nan_to_num(lut.variance[source], nan=0.0))
    return np.where(found, np.maximum(mean + std * rng.standard_normal(n), 0.0), 0.0)


def bin_stats(lut: EpwLut, cls: np.ndarray, echo: np.ndarray, distance: np.ndarray, yaw: np.ndarray,
              layer: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(count, mean, std) of the exact bins addressed by aligned arrays; std is NaN when count < 2."""
    cls = np.asarray(cls, dtype=np.int64)
    n = len(cls)
    echo = np.broadcast_to(np.asarray(echo, dtype=np.int64), (n,))
    distance = np.clip(np.asarray(distance, dtype=np.float64), lut.bins.distance_edges[0], lut.bins.distance_edges[-1])
    index = (cls, echo, lut.bins.layer_bin(layer, n), lut.bins.distance_bin(distance), lut.bins.yaw_bin(yaw))
    return lut.count[index], lut.mean[index], np.sqrt(lut.variance[index])


def lut_report(lut: EpwLut) -> str:
    """CSV summary with one row per non-empty bin; std is blank when count < 2."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    header = list(REPORT_HEADER)
    if lut.bins.use_layer:
        header.insert(2, "layer")
    writer.writerow(header)
    d_edges, y_edges = lut.bins.distance_edges, lut.bins.yaw_edges
    variance = lut.variance
    for c, e, l, d, y in zip(*np.nonzero(lut.count)):
        var = variance[c, e, l, d, y]
        row = [
            ClassLabel(int(c)).name.lower(), int(e),
            f"{d_edges[d]:g}", f"{d_edges[d + 1]:g}", f"{y_edges[y]:g}", f"{y_edges[y + 1]:g}",
            int(lut.count[c, e, l, d, y]), f"{lut.mean[c, e, l, d, y]:.6f}",
            "" if np.isnan(var) else f"{np.sqrt(var):.6f}",
        ]
        if lut.bins.use_layer:
            row.insert(2, int(l))
        writer.writerow(row)
    return buffer.getvalue()


def write_lut(path: Union[str, Path], lut: EpwLut) -> None:
    """Write a LUT1 file."""
    bins = lut.bins
    header = _LUT_HEADER.pack(
        LUT_MAGIC, LUT_VERSION, int(bins.use_layer), bins.n_layers, len(bins.distance_edges), len(bins.yaw_edges),
    )
    edges = np.asarray(bins.distance_edges + bins.yaw_edges, dtype="<f8").tobytes()
    table = np.empty(lut.count.size, dtype=_BIN_DTYPE)
    table["count"] = lut.count.ravel()
    table["mean"] = lut.mean.ravel()
    table["m2"] = lut.m2.ravel()
    Path(path).write_bytes(header + edges + table.tobytes())


def read_lut(path: Union[str, Path]) -> EpwLut:
    """
    Read a LUT1 file.

    Raises:
        FormatError: On a bad magic, unsupported version or size mismatch
    """
    raw = Path(path).read_bytes()
    if len(raw) < _LUT_HEADER.size:
        raise FormatError(f"{path}: truncated LUT header")
    magic, version, use_layer, n_layers, n_dist, n_yaw = _LUT_HEADER.unpack_from(raw)
    if magic != LUT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {LUT_MAGIC!r}")
    if version != LUT_VERSION:
        raise FormatError(f"{path}: unsupported LUT version {version}")
    offset = _LUT_HEADER.size
    edges_end = offset + 8 * (n_dist + n_yaw)
    if len(raw) < edges_end:
        raise FormatError(f"{path}: truncated bin edges")
    edges = np.frombuffer(raw, dtype="<f8", count=n_dist + n_yaw, offset=offset)
    try:
        bins = LutBins(tuple(edges[:n_dist]), tuple(edges[n_dist:]), use_layer=bool(use_layer), n_layers=n_layers)
    except ConfigurationError as e:
        raise FormatError(f"{path}: {e}") from e
    cells = int(np.prod(bins.shape))
    if len(raw) - edges_end != cells * _BIN_DTYPE.itemsize:
        raise FormatError(f"{path}: bin table size does not match the declared edges")
    table = np.frombuffer(raw, dtype=_BIN_DTYPE, offset=edges_end)
    return EpwLut(
        bins,
        table["count"].astype(np.int64).reshape(bins.shape),
        table["mean"].astype(np.float64).reshape(bins.shape),
        table["m2"].astype(np.float64).reshape(bins.shape),
    )


def bin_centers(edges: Tuple[float, ...]) -> np.ndarray:
    edges = np.asarray(edges)
    return 0.5 * (edges[:-1] + edges[1:])


def non_empty_bins(lut: EpwLut, min_count: int = 1) -> List[Tuple[int, int, int, int, int]]:
    """Indices of bins holding at least min_count points."""
    return [tuple(int(v) for v in idx) for idx in zip(*np.nonzero(lut.count >= min_count))]
