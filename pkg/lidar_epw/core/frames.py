"""
LIDAR-EPW Frames
================

Point-cloud containers exchanged between the pipeline stages:

- DenseFrame: ideal simulator output, every sub-ray hit of every ray
- ScanFrame: realistic output, up to three echoes per ray

Both are stored column-wise (one numpy array per field) and kept in a
canonical sort order, so equality, hashing to files and vectorized
statistics are straightforward. Per-point views (DenseSample, ScanPoint)
are available for readability.

This module also owns the ground-truth echo rule (distance-gap clustering)
and the dense JSON-lines / scan CSV file formats.

Author: LIDAR-EPW Team
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

import numpy as np

from ..errors import DataError, FormatError
from .sensor import MAX_ECHOES, NUM_CLASSES, ClassLabel, SensorSpec, azimuth_centers, check_class_codes

logger = logging.getLogger(__name__)

CLUSTER_GAP_M = 0.5
MAX_FRAME_ID = 2**64 - 1
KEY_DTYPE = np.dtype([("frame", "<u8"), ("layer", "<i8"), ("az", "<i8"), ("echo", "<i8")])
SCAN_CSV_HEADER = "frame,echo,layer,az,distance_m,epw_ns,cls"


@dataclass(frozen=True)
class DenseSample:
    """One sub-ray hit of the ideal ray profile."""

    layer: int
    azimuth_index: int
    sub_ray_index: int
    distance: float
    cls: ClassLabel
    incidence_cos: float
    true_epw: float

    @property
    def ray_id(self) -> Tuple[int, int]:
        return (self.layer, self.azimuth_index)


@dataclass(frozen=True)
class ScanPoint:
    """One realistic scan point (a single echo of a single ray)."""

    layer: int
    azimuth_index: int
    echo: int
    distance: float
    epw: float
    cls: ClassLabel


def _ray_starts(layer: np.ndarray, azimuth_index: np.ndarray) -> np.ndarray:
    """Boolean mask marking the first row of every ray group (rows sorted by ray)."""
    starts = np.ones(len(layer), dtype=bool)
    if len(layer) > 1:
        starts[1:] = (layer[1:] != layer[:-1]) | (azimuth_index[1:] != azimuth_index[:-1])
    return starts


@dataclass(eq=False)
class DenseFrame:
    """
    Dense annotated ray profile of one full scan.

    Rows are sorted by (layer, azimuth_index), then ascending distance,
    ties broken by sub-ray index.
    """

    frame_id: int
    layer: np.ndarray
    azimuth_index: np.ndarray
    sub_ray: np.ndarray
    distance: np.ndarray
    cls: np.ndarray
    incidence_cos: np.ndarray
    true_epw: np.ndarray

    def __post_init__(self):
        self.frame_id = check_frame_id(self.frame_id)
        self.layer = np.asarray(self.layer, dtype=np.int64).reshape(-1)
        self.azimuth_index = np.asarray(self.azimuth_index, dtype=np.int64).reshape(-1)
        self.sub_ray = np.asarray(self.sub_ray, dtype=np.int64).reshape(-1)
        self.distance = np.asarray(self.distance, dtype=np.float64).reshape(-1)
        self.cls = np.asarray(self.cls, dtype=np.int64).reshape(-1)
        self.incidence_cos = np.asarray(self.incidence_cos, dtype=np.float64).reshape(-1)
        self.true_epw = np.asarray(self.true_epw, dtype=np.float64).reshape(-1)
        n = len(self.layer)
        columns = (self.azimuth_index, self.sub_ray, self.distance, self.cls, self.incidence_cos, self.true_epw)
        if any(len(column) != n for column in columns):
            raise DataError("DenseFrame columns must have equal length")
        check_class_codes(self.cls)
        order = np.lexsort((self.sub_ray, self.distance, self.azimuth_index, self.layer))
        if np.any(order != np.arange(n)):
            for name in ("layer", "azimuth_index", "sub_ray", "distance", "cls", "incidence_cos", "true_epw"):
                setattr(self, name, getattr(self, name)[order])

    def __len__(self) -> int:
        return len(self.layer)

    @classmethod
    def empty(cls, frame_id: int) -> "DenseFrame":
        return cls(frame_id, *([np.zeros(0)] * 7))

    @classmethod
    def from_samples(cls, frame_id: int, samples: Iterable[DenseSample]) -> "DenseFrame":
        samples = list(samples)
        if not samples:
            return cls.empty(frame_id)
        return cls(
            frame_id,
            [s.layer for s in samples],
            [s.azimuth_index for s in samples],
            [s.sub_ray_index for s in samples],
            [s.distance for s in samples],
            [int(s.cls) for s in samples],
            [s.incidence_cos for s in samples],
            [s.true_epw for s in samples],
        )

    @property
    def samples(self) -> List[DenseSample]:
        return [
            DenseSample(int(l), int(a), int(s), float(d), ClassLabel(int(c)), float(i), float(e))
            for l, a, s, d, c, i, e in zip(
                self.layer, self.azimuth_index, self.sub_ray, self.distance,
                self.cls, self.incidence_cos, self.true_epw,
            )
        ]

    def ray_slices(self) -> List[Tuple[int, int, slice]]:
        """(layer, azimuth_index, row slice) of every ray present in the frame."""
        starts = np.flatnonzero(_ray_starts(self.layer, self.azimuth_index))
        stops = np.append(starts[1:], len(self))
        return [
            (int(self.layer[a]), int(self.azimuth_index[a]), slice(int(a), int(b)))
            for a, b in zip(starts, stops)
        ]

    def validate(self, spec: SensorSpec) -> None:
        """Check every DenseSample invariant against a sensor spec."""
        if len(self) == 0:
            return
        for name in ("distance", "incidence_cos", "true_epw"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DataError(f"Frame {self.frame_id}: non-finite {name}")
        if np.any(self.distance <= 0) or np.any(self.distance > spec.max_range):
            raise DataError(f"Frame {self.frame_id}: sample distance outside (0, {spec.max_range}]")
        if np.any(self.incidence_cos < 0) or np.any(self.incidence_cos > 1):
            raise DataError(f"Frame {self.frame_id}: incidence_cos outside [0, 1]")
        if np.any(self.true_epw < 0):
            raise DataError(f"Frame {self.frame_id}: negative EPW")
        _check_cells(self.layer, self.azimuth_index, spec, self.frame_id)

    def equals(self, other: "DenseFrame") -> bool:
        return self.frame_id == other.frame_id and self.samples == other.samples


@dataclass(eq=False)
class ScanFrame:
    """
    Realistic scan of one frame: up to three echoes per ray.

    Rows are sorted by (layer, azimuth_index, echo).
    """

    frame_id: int
    layer: np.ndarray
    azimuth_index: np.ndarray
    echo: np.ndarray
    distance: np.ndarray
    epw: np.ndarray
    cls: np.ndarray

    def __post_init__(self):
        self.frame_id = check_frame_id(self.frame_id)
        self.layer = np.asarray(self.layer, dtype=np.int64).reshape(-1)
        self.azimuth_index = np.asarray(self.azimuth_index, dtype=np.int64).reshape(-1)
        self.echo = np.asarray(self.echo, dtype=np.int64).reshape(-1)
        self.distance = np.asarray(self.distance, dtype=np.float64).reshape(-1)
        self.epw = np.asarray(self.epw, dtype=np.float64).reshape(-1)
        self.cls = np.asarray(self.cls, dtype=np.int64).reshape(-1)
        n = len(self.layer)
        if any(len(c) != n for c in (self.azimuth_index, self.echo, self.distance, self.epw, self.cls)):
            raise DataError("ScanFrame columns must have equal length")
        check_class_codes(self.cls)
        order = np.lexsort((self.echo, self.azimuth_index, self.layer))
        if np.any(order != np.arange(n)):
            for name in ("layer", "azimuth_index", "echo", "distance", "epw", "cls"):
                setattr(self, name, getattr(self, name)[order])

    def __len__(self) -> int:
        return len(self.layer)

    @classmethod
    def empty(cls, frame_id: int) -> "ScanFrame":
        return cls(frame_id, *([np.zeros(0)] * 6))

    @classmethod
    def from_points(cls, frame_id: int, points: Iterable[ScanPoint]) -> "ScanFrame":
        points = list(points)
        if not points:
            return cls.empty(frame_id)
        return cls(
            frame_id,
            [p.layer for p in points],
            [p.azimuth_index for p in points],
            [p.echo for p in points],
            [p.distance for p in points],
            [p.epw for p in points],
            [int(p.cls) for p in points],
        )

    @classmethod
    def concat(cls, frame_id: int, parts: Iterable["ScanFrame"]) -> "ScanFrame":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty(frame_id)
        names = ("layer", "azimuth_index", "echo", "distance", "epw", "cls")
        return cls(frame_id, *[np.concatenate([getattr(p, n) for p in parts]) for n in names])

    @property
    def points(self) -> List[ScanPoint]:
        return [
            ScanPoint(int(l), int(a), int(e), float(d), float(w), ClassLabel(int(c)))
            for l, a, e, d, w, c in zip(
                self.layer, self.azimuth_index, self.echo, self.distance, self.epw, self.cls
            )
        ]

    def select(self, mask: np.ndarray) -> "ScanFrame":
        return ScanFrame(
            self.frame_id, self.layer[mask], self.azimuth_index[mask], self.echo[mask],
            self.distance[mask], self.epw[mask], self.cls[mask],
        )

    def for_echo(self, echo: int) -> "ScanFrame":
        return self.select(self.echo == echo)

    def keys(self) -> np.ndarray:
        """Structured (frame, layer, az, echo) key per point."""
        return point_keys(self.frame_id, self.layer, self.azimuth_index, self.echo)

    def validate(self, spec: SensorSpec) -> None:
        """
        Check the ScanFrame invariants.

        Raises:
            DataError: On duplicate points, echo sets that are not a prefix
                of {0, 1, 2}, non-increasing echo distances or bad values
        """
        if len(self) == 0:
            return
        if not (np.all(np.isfinite(self.distance)) and np.all(np.isfinite(self.epw))):
            raise DataError(f"Frame {self.frame_id}: non-finite distance or EPW")
        _check_cells(self.layer, self.azimuth_index, spec, self.frame_id)
        if np.any(self.echo < 0) or np.any(self.echo >= spec.max_echoes):
            raise DataError(f"Frame {self.frame_id}: echo index outside 0..{spec.max_echoes - 1}")
        if np.any(self.distance < 0) or np.any(self.epw < 0):
            raise DataError(f"Frame {self.frame_id}: negative distance or EPW")
        keys = self.keys()
        if len(np.unique(keys)) != len(keys):
            raise DataError(f"Frame {self.frame_id}: duplicate point for the same (layer, az, echo)")
        starts = _ray_starts(self.layer, self.azimuth_index)
        start_index = np.maximum.accumulate(np.where(starts, np.arange(len(self)), 0))
        if np.any(self.echo != np.arange(len(self)) - start_index):
            raise DataError(f"Frame {self.frame_id}: echoes of a ray must form a prefix of 0, 1, 2")
        same_ray = ~starts[1:]
        if np.any(np.diff(self.distance)[same_ray] <= 0):
            raise DataError(f"Frame {self.frame_id}: echo distances must strictly increase")

    def equals(self, other: "ScanFrame") -> bool:
        return self.frame_id == other.frame_id and self.points == other.points


def point_keys(frame_id: Any, layer: np.ndarray, azimuth_index: np.ndarray, echo: Any) -> np.ndarray:
    """
    Build (frame, layer, az, echo) keys as a KEY_DTYPE record array.

    The frame field is a full u64, so any valid frame id keeps its own keys.
    Records sort lexicographically and work with np.unique / np.intersect1d.
    """
    frame, layer, azimuth_index, echo = np.broadcast_arrays(
        np.asarray(frame_id, dtype=np.uint64),
        np.asarray(layer, dtype=np.int64),
        np.asarray(azimuth_index, dtype=np.int64),
        np.asarray(echo, dtype=np.int64),
    )
    keys = np.empty(frame.shape, dtype=KEY_DTYPE).reshape(-1)
    keys["frame"] = frame.reshape(-1)
    keys["layer"] = layer.reshape(-1)
    keys["az"] = azimuth_index.reshape(-1)
    keys["echo"] = echo.reshape(-1)
    return keys


def check_frame_id(frame_id: Any) -> int:
    """Return frame_id as an int, raising DataError outside 0..2**64 - 1."""
    if isinstance(frame_id, (bool, np.bool_)) or not isinstance(frame_id, (int, np.integer)):
        raise DataError(f"frame_id must be an integer, got {frame_id!r}")
    frame_id = int(frame_id)
    if not 0 <= frame_id <= MAX_FRAME_ID:
        raise DataError(f"frame_id {frame_id} outside 0..{MAX_FRAME_ID}")
    return frame_id


def _check_cells(layer: np.ndarray, azimuth_index: np.ndarray, spec: SensorSpec, frame_id: int) -> None:
    if np.any(layer < 0) or np.any(layer >= spec.rows):
        raise DataError(f"Frame {frame_id}: layer outside 0..{spec.rows - 1}")
    if np.any(azimuth_index < 0) or np.any(azimuth_index >= spec.cols):
        raise DataError(f"Frame {frame_id}: azimuth index outside 0..{spec.cols - 1}")


# ---------------------------------------------------------------------------
# Ground-truth echo rule
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class EchoClusters:
    """
    Distance clusters of a DenseFrame, first max_echoes per ray.

    Per-cluster arrays are aligned; start/stop index the frame rows of the
    cluster. sample_echo maps every frame row to its echo index (-1 when the
    row belongs to a cluster beyond max_echoes).
    """

    layer: np.ndarray
    azimuth_index: np.ndarray
    echo: np.ndarray
    min_distance: np.ndarray
    mean_epw: np.ndarray
    majority_cls: np.ndarray
    start: np.ndarray
    stop: np.ndarray
    ray_clusters: np.ndarray
    sample_echo: np.ndarray
    sample_cluster: np.ndarray

    def __len__(self) -> int:
        return len(self.layer)


def cluster_rays(frame: DenseFrame, gap: float = CLUSTER_GAP_M, max_echoes: int = MAX_ECHOES) -> EchoClusters:
    """
    Split every ray's samples into clusters separated by distance gaps > gap.

    The nearest max_echoes clusters become echoes 0, 1, 2. Cluster distance is
    the cluster minimum, EPW the mean true EPW, class the majority class (the
    lower class code wins a tie). ray_clusters counts all clusters of the
    cluster's ray, including those beyond max_echoes.
    """
    if gap <= 0:
        raise DataError("Cluster gap must be positive")
    n = len(frame)
    if n == 0:
        empty_i = np.zeros(0, dtype=np.int64)
        empty_f = np.zeros(0, dtype=np.float64)
        return EchoClusters(empty_i, empty_i, empty_i, empty_f, empty_f, empty_i, empty_i, empty_i,
                            empty_i, empty_i, empty_i)
    new_ray = _ray_starts(frame.layer, frame.azimuth_index)
    new_cluster = new_ray.copy()
    new_cluster[1:] |= np.diff(frame.distance) > gap
    cluster_id = np.cumsum(new_cluster) - 1
    ray_id = np.cumsum(new_ray) - 1
    first_cluster = cluster_id[new_ray]
    sample_echo = cluster_id - first_cluster[ray_id]
    n_clusters_per_ray = np.bincount(ray_id, weights=new_cluster).astype(np.int64)

    starts = np.flatnonzero(new_cluster)
    stops = np.append(starts[1:], n)
    counts = stops - starts
    mean_epw = np.bincount(cluster_id, weights=frame.true_epw) / counts
    class_counts = np.zeros((len(starts), NUM_CLASSES), dtype=np.int64)
    np.add.at(class_counts, (cluster_id, frame.cls), 1)
    majority = np.argmax(class_counts, axis=1)

    keep = sample_echo[starts] < max_echoes
    kept_index = np.full(len(starts), -1, dtype=np.int64)
    kept_index[keep] = np.arange(int(keep.sum()))
    sample_cluster = kept_index[cluster_id]
    return EchoClusters(
        layer=frame.layer[starts][keep],
        azimuth_index=frame.azimuth_index[starts][keep],
        echo=sample_echo[starts][keep],
        min_distance=frame.distance[starts][keep],
        mean_epw=mean_epw[keep],
        majority_cls=majority[keep],
        start=starts[keep],
        stop=stops[keep],
        ray_clusters=n_clusters_per_ray[ray_id[starts]][keep],
        sample_echo=np.where(sample_cluster >= 0, sample_echo, -1),
        sample_cluster=sample_cluster,
    )


def truth_scan(
    frame: DenseFrame,
    gap: float = CLUSTER_GAP_M,
    spec: Optional[SensorSpec] = None,
    rng: Optional[np.random.Generator] = None,
    echo_dropout: float = 0.0,
    range_jitter: float = 0.0,
) -> ScanFrame:
    """
    Reduce a dense frame to its ground-truth scan.

    Without artifacts every one of the first three clusters of a ray becomes
    an echo (distance = cluster minimum, EPW = cluster mean true EPW).

    Args:
        frame: Dense frame to reduce
        gap: Cluster gap threshold in meters
        spec: Sensor spec, needed for yaw-dependent echo dropout
        rng: Random generator driving the optional artifacts
        echo_dropout: Probability scale of losing the last echo of a ray,
            growing linearly from 0.5x at boresight to 1x at the FOV edge
        range_jitter: Probability of reporting a random in-cluster sample
            instead of the cluster minimum

    Returns:
        ScanFrame: Ground-truth scan of the frame
    """
    clusters = cluster_rays(frame, gap)
    distance = clusters.min_distance.copy()
    epw = clusters.mean_epw.copy()
    keep = np.ones(len(clusters), dtype=bool)
    if (echo_dropout > 0 or range_jitter > 0) and len(clusters):
        if rng is None:
            raise DataError("Sensor artifacts need a random generator")
        if range_jitter > 0:
            jitter = rng.random(len(clusters)) < range_jitter
            offsets = np.floor(rng.random(len(clusters)) * (clusters.stop - clusters.start)).astype(np.int64)
            picked = clusters.start + offsets
            distance[jitter] = frame.distance[picked[jitter]]
            epw[jitter] = frame.true_epw[picked[jitter]]
        if echo_dropout > 0:
            if spec is None:
                raise DataError("Echo dropout needs the sensor spec")
            yaw = np.abs(azimuth_centers(spec)[clusters.azimuth_index]) / max(abs(spec.h_fov[0]), abs(spec.h_fov[1]))
            probability = echo_dropout * (0.5 + 0.5 * yaw)
            last = np.append(
                (clusters.layer[1:] != clusters.layer[:-1]) | (clusters.azimuth_index[1:] != clusters.azimuth_index[:-1]),
                True,
            )
            keep = ~(last & (rng.random(len(clusters)) < probability))
    return ScanFrame(
        frame.frame_id,
        clusters.layer[keep],
        clusters.azimuth_index[keep],
        clusters.echo[keep],
        distance[keep],
        epw[keep],
        clusters.majority_cls[keep],
    )


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def dense_frame_to_groups(frame: DenseFrame) -> List[Dict[str, Any]]:
    """Ray groups of a frame in the dense JSON schema."""
    groups = []
    for layer, az, rows in frame.ray_slices():
        groups.append({
            "frame": frame.frame_id,
            "layer": layer,
            "az": az,
            "samples": [
                {"sub": int(s), "d": float(d), "cls": int(c), "inc": float(i), "epw": float(e)}
                for s, d, c, i, e in zip(
                    frame.sub_ray[rows], frame.distance[rows], frame.cls[rows],
                    frame.incidence_cos[rows], frame.true_epw[rows],
                )
            ],
        })
    return groups


def dense_frame_from_groups(frame_id: int, groups: Iterable[Dict[str, Any]]) -> DenseFrame:
    """
    Build a DenseFrame from ray groups in the dense JSON schema.

    Raises:
        FormatError: If a group or sample misses a field
        DataError: If a class code is invalid
    """
    columns: Dict[str, list] = {k: [] for k in ("layer", "az", "sub", "d", "cls", "inc", "epw")}
    try:
        for group in groups:
            layer, az = int(group["layer"]), int(group["az"])
            for sample in group["samples"]:
                columns["layer"].append(layer)
                columns["az"].append(az)
                for key in ("sub", "d", "cls", "inc", "epw"):
                    columns[key].append(sample[key])
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"Malformed ray group in frame {frame_id}: {e!r}") from e
    for code in columns["cls"]:
        ClassLabel.from_code(code)
    try:
        return DenseFrame(
            frame_id, columns["layer"], columns["az"], columns["sub"], columns["d"],
            columns["cls"], columns["inc"], columns["epw"],
        )
    except (TypeError, ValueError) as e:
        if isinstance(e, DataError):
            raise
        raise FormatError(f"Malformed sample values in frame {frame_id}: {e}") from e


def write_dense_jsonl(path: Union[str, Path], frames: Iterable[DenseFrame]) -> None:
    """Write frames as JSON-lines, one ray group per line."""
    with open(path, "w", encoding="utf-8") as handle:
        for frame in frames:
            for group in dense_frame_to_groups(frame):
                handle.write(json.dumps(group, separators=(",", ":")) + "\n")


def read_dense_jsonl(path: Union[str, Path]) -> List[DenseFrame]:
    """
    Read a dense-frame JSON-lines file.

    Frames are returned in order of first appearance; a frame without any
    ray group cannot be represented in the file and is therefore absent.
    """
    grouped: Dict[int, List[Dict[str, Any]]] = {}
    try:
        with open(path, "r", encoding="utf-8") as handle:
            for line_number, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    group = json.loads(line)
                    frame_id = int(group["frame"])
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                    raise FormatError(f"{path}:{line_number}: malformed ray group ({e})") from e
                grouped.setdefault(frame_id, []).append(group)
    except OSError as e:
        raise FormatError(f"Cannot read {path}: {e}") from e
    return [dense_frame_from_groups(frame_id, groups) for frame_id, groups in grouped.items()]


def write_scan_csv(path: Union[str, Path], frames: Iterable[ScanFrame]) -> None:
    """Write scan frames as CSV with 6 fractional digits; frame ids stay exact integers."""
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write(SCAN_CSV_HEADER + "\n")
        for frame in frames:
            for echo, layer, az, distance, epw, cls in zip(
                frame.echo, frame.layer, frame.azimuth_index, frame.distance, frame.epw, frame.cls
            ):
                handle.write(f"{frame.frame_id},{echo},{layer},{az},{distance:.6f},{epw:.6f},{cls}\n")


def read_scan_csv(path: Union[str, Path]) -> List[ScanFrame]:
    """
    Read a scan CSV back into frames, in order of first appearance.

    Raises:
        FormatError: On a missing/unknown header or unparsable rows
    """
    try:
        with open(path, "r", encoding="utf-8") as handle:
            header = handle.readline().strip()
            if header != SCAN_CSV_HEADER:
                raise FormatError(f"{path}: expected header '{SCAN_CSV_HEADER}', got '{header}'")
            data = np.loadtxt(handle, delimiter=",", ndmin=2, dtype=str)
    except OSError as e:
        raise FormatError(f"Cannot read {path}: {e}") from e
    except ValueError as e:
        raise FormatError(f"{path}: unparsable row ({e})") from e
    if data.size == 0:
        return []
    if data.shape[1] != 7:
        raise FormatError(f"{path}: expected 7 columns, got {data.shape[1]}")
    try:
        frame_ids = np.array([check_frame_id(int(v)) for v in data[:, 0]], dtype=np.uint64)
        values = data[:, 1:].astype(np.float64)
    except (ValueError, DataError) as e:
        raise FormatError(f"{path}: unparsable row ({e})") from e
    _, first = np.unique(frame_ids, return_index=True)
    frames = []
    for frame_id in frame_ids[np.sort(first)]:
        rows = values[frame_ids == frame_id]
        frames.append(ScanFrame(int(frame_id), rows[:, 1], rows[:, 2], rows[:, 0], rows[:, 3], rows[:, 4], rows[:, 5]))
    return frames
