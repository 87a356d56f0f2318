"""
LIDAR-EPW Evaluation
====================

KPI suite comparing two scan traces (reference vs predicted, or real vs
simulated):
- Paired EPW error statistics and signed error histogram
- Nonzero-EPW distribution comparison (Wasserstein-1 + histogram intersection)
- Class-to-class and box-to-box breakdowns
- JSON / CSV / gnuplot emission

Author: LIDAR-EPW Team
"""

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import wasserstein_distance

from ..config import read_mapping
from ..errors import ConfigurationError, DataError, FormatError
from .frames import KEY_DTYPE, ScanFrame
from .sensor import ClassLabel, SensorSpec, to_cartesian

logger = logging.getLogger(__name__)

EPW_EDGES = np.linspace(0.0, 50.0, 101)
ERROR_EDGES = np.linspace(-25.0, 25.0, 101)
KPI_FAMILIES = ("error_statistics", "error_histogram", "overall_distribution", "class_to_class", "box_to_box")

Trace = Sequence[ScanFrame]


@dataclass(eq=False)
class Histogram1D:
    """Counts over ascending bin edges."""

    edges: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if len(self.edges) < 2 or np.any(np.diff(self.edges) <= 0):
            raise ConfigurationError("Histogram edges must be strictly ascending")
        if self.counts.shape != (len(self.edges) - 1,):
            raise ConfigurationError("Histogram counts do not match its edges")

    @classmethod
    def of(cls, values: np.ndarray, edges: np.ndarray = EPW_EDGES, clamp: bool = False) -> "Histogram1D":
        """Histogram of values; with clamp, out-of-range values land in the outer bins."""
        values = np.asarray(values, dtype=np.float64)
        if clamp:
            values = np.clip(values, edges[0], edges[-1])
        counts, _ = np.histogram(values, bins=edges)
        return cls(edges, counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    def normalized(self) -> np.ndarray:
        return self.counts / self.total if self.total else np.zeros(len(self.counts))

    def to_dict(self) -> Dict[str, Any]:
        return {"edges": [float(v) for v in self.edges], "counts": [int(v) for v in self.counts]}

    @classmethod
    def from_dict(cls, content: Dict[str, Any]) -> "Histogram1D":
        return cls(content["edges"], content["counts"])

    def to_gnuplot(self, title: str = "") -> str:
        """Two-column (bin center, count) text."""
        lines = [f"# {title}" if title else "# histogram", "# center count"]
        lines += [f"{c:.6f} {n}" for c, n in zip(self.centers, self.counts)]
        return "\n".join(lines) + "\n"


def histogram_wasserstein(a: Histogram1D, b: Histogram1D) -> Optional[float]:
    """Wasserstein-1 between two normalized histograms on the same edges; None if either is empty."""
    if not np.array_equal(a.edges, b.edges):
        raise ConfigurationError("Histograms must share their edges")
    if a.total == 0 or b.total == 0:
        return None
    return float(wasserstein_distance(a.centers, b.centers, u_weights=a.counts, v_weights=b.counts))


def histogram_intersection(a: Histogram1D, b: Histogram1D) -> Optional[float]:
    """Sum of bin-wise minima of the normalized histograms, in [0, 1]; None if either is empty."""
    if a.total == 0 or b.total == 0:
        return None
    return float(np.minimum(a.normalized(), b.normalized()).sum())


@dataclass(eq=False)
class DistributionComparison:
    """Nonzero-EPW histograms of two traces and their distances (None = Empty)."""

    reference: Histogram1D
    predicted: Histogram1D
    wasserstein: Optional[float]
    intersection: Optional[float]

    @property
    def empty(self) -> bool:
        return self.wasserstein is None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "wasserstein_ns": self.wasserstein,
            "intersection": self.intersection,
            "reference": self.reference.to_dict(),
            "predicted": self.predicted.to_dict(),
        }

    @classmethod
    def from_dict(cls, content: Dict[str, Any]) -> "DistributionComparison":
        return cls(
            Histogram1D.from_dict(content["reference"]),
            Histogram1D.from_dict(content["predicted"]),
            content["wasserstein_ns"],
            content["intersection"],
        )


def compare_epw(a: np.ndarray, b: np.ndarray, edges: np.ndarray = EPW_EDGES) -> DistributionComparison:
    """Compare the strictly positive EPW values of two samples."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    hist_a = Histogram1D.of(a[a > 0], edges, clamp=True)
    hist_b = Histogram1D.of(b[b > 0], edges, clamp=True)
    return DistributionComparison(
        hist_a, hist_b, histogram_wasserstein(hist_a, hist_b), histogram_intersection(hist_a, hist_b)
    )


@dataclass(eq=False)
class _Flat:
    """A trace flattened to aligned columns."""

    keys: np.ndarray
    layer: np.ndarray
    azimuth_index: np.ndarray
    distance: np.ndarray
    epw: np.ndarray
    cls: np.ndarray

    @classmethod
    def of(cls, trace: Trace) -> "_Flat":
        frames = [f for f in trace if len(f)]
        if not frames:
            empty_i, empty_f = np.zeros(0, dtype=np.int64), np.zeros(0)
            return cls(np.zeros(0, dtype=KEY_DTYPE), empty_i, empty_i, empty_f, empty_f, empty_i)
        keys = np.concatenate([f.keys() for f in frames])
        if len(np.unique(keys)) != len(keys):
            raise DataError("Trace holds duplicate (frame, layer, az, echo) points")
        return cls(
            keys,
            np.concatenate([f.layer for f in frames]),
            np.concatenate([f.azimuth_index for f in frames]),
            np.concatenate([f.distance for f in frames]),
            np.concatenate([f.epw for f in frames]),
            np.concatenate([f.cls for f in frames]),
        )


@dataclass(eq=False)
class ErrorStats:
    """Paired EPW error statistics (predicted - reference)."""

    matched: int
    unmatched_reference: int
    unmatched_predicted: int
    mean_abs_error: float
    mse: float
    histogram: Histogram1D

    def summary(self) -> Dict[str, Any]:
        return {
            "matched": self.matched,
            "unmatched_reference": self.unmatched_reference,
            "unmatched_predicted": self.unmatched_predicted,
            "mean_abs_error_ns": self.mean_abs_error,
            "mse_ns2": self.mse,
        }


def _errors(reference: _Flat, predicted: _Flat) -> Tuple[np.ndarray, np.ndarray]:
    _, in_ref, in_pred = np.intersect1d(reference.keys, predicted.keys, assume_unique=True, return_indices=True)
    return predicted.epw[in_pred] - reference.epw[in_ref], in_ref


def _error_stats(reference: _Flat, predicted: _Flat) -> ErrorStats:
    errors, _ = _errors(reference, predicted)
    if len(errors) == 0:
        raise DataError("Reference and predicted traces share no (frame, layer, az, echo) points")
    matched = len(errors)
    return ErrorStats(
        matched=matched,
        unmatched_reference=len(reference.keys) - matched,
        unmatched_predicted=len(predicted.keys) - matched,
        mean_abs_error=float(np.mean(np.abs(errors))),
        mse=float(np.mean(errors ** 2)),
        histogram=Histogram1D.of(errors, ERROR_EDGES, clamp=True),
    )


def epw_error_stats(reference: Trace, predicted: Trace) -> ErrorStats:
    """
    Compare EPWs point by point on the shared (frame, layer, az, echo) keys.

    Raises:
        DataError: If the traces share no keys
    """
    stats = _error_stats(_Flat.of(reference), _Flat.of(predicted))
    if stats.unmatched_reference or stats.unmatched_predicted:
        logger.info(
            f"{stats.unmatched_reference} reference and {stats.unmatched_predicted} predicted points have no counterpart"
        )
    return stats


def nonzero_epw_distributions(a: Trace, b: Trace) -> DistributionComparison:
    """Histograms of strictly positive EPWs of two traces and their distances."""
    return compare_epw(_Flat.of(a).epw, _Flat.of(b).epw)


@dataclass(eq=False)
class ClassKpi:
    matched: int
    mse: Optional[float]
    mean_abs_error: Optional[float]
    distribution: DistributionComparison

    def to_dict(self) -> Dict[str, Any]:
        return {
            "matched": self.matched,
            "mse_ns2": self.mse,
            "mean_abs_error_ns": self.mean_abs_error,
            "distribution": self.distribution.to_dict(),
        }

    @classmethod
    def from_dict(cls, content: Dict[str, Any]) -> "ClassKpi":
        return cls(content["matched"], content["mse_ns2"], content["mean_abs_error_ns"],
                   DistributionComparison.from_dict(content["distribution"]))


def _class_kpi(reference: _Flat, predicted: _Flat) -> Dict[str, ClassKpi]:
    result = {}
    errors, in_ref = _errors(reference, predicted)
    present = np.union1d(reference.cls, predicted.cls)
    for code in present:
        label = ClassLabel(int(code))
        class_errors = errors[reference.cls[in_ref] == code]
        result[label.name.lower()] = ClassKpi(
            matched=len(class_errors),
            mse=float(np.mean(class_errors ** 2)) if len(class_errors) else None,
            mean_abs_error=float(np.mean(np.abs(class_errors))) if len(class_errors) else None,
            distribution=compare_epw(reference.epw[reference.cls == code], predicted.epw[predicted.cls == code]),
        )
    return result


def class_kpi(a: Trace, b: Trace) -> Dict[str, ClassKpi]:
    """
    Per-class MSE on matched points (partitioned by the first trace's class)
    and per-class nonzero-EPW distribution distance. Classes absent from
    both traces are omitted.
    """
    return _class_kpi(_Flat.of(a), _Flat.of(b))


@dataclass(frozen=True)
class OrientedBox:
    """Yaw-rotated cuboid in the sensor frame."""

    center: Tuple[float, float, float]
    yaw: float
    half_extents: Tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "half_extents", tuple(float(v) for v in self.half_extents))
        if len(self.center) != 3 or len(self.half_extents) != 3:
            raise ConfigurationError("center and half_extents must be 3-vectors")
        if min(self.half_extents) <= 0:
            raise ConfigurationError(f"Box half_extents must be positive, got {self.half_extents}")

    @classmethod
    def from_dict(cls, content: Dict[str, Any]) -> "OrientedBox":
        try:
            return cls(content["center"], float(content.get("yaw", 0.0)), content["half_extents"])
        except (KeyError, TypeError) as e:
            raise ConfigurationError(f"Invalid box definition {content!r}") from e

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Inverse-rotate into the box frame, then test |local| <= half_extents on every axis."""
        rel = np.asarray(points, dtype=np.float64).reshape(-1, 3) - np.asarray(self.center)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local = np.stack([c * rel[:, 0] + s * rel[:, 1], -s * rel[:, 0] + c * rel[:, 1], rel[:, 2]], axis=1)
        return np.all(np.abs(local) <= np.asarray(self.half_extents), axis=1)


BoxPair = Tuple[OrientedBox, OrientedBox]


def load_box_pairs(path: Union[str, Path]) -> List[BoxPair]:
    """
    Read box pairs from YAML:

        pairs:
          - reference: {center: [x, y, z], yaw: 0.0, half_extents: [hx, hy, hz]}
            predicted: {...}    # defaults to the reference box
    """
    content = read_mapping(path)
    pairs = content.get("pairs")
    if not isinstance(pairs, list):
        raise FormatError(f"{path}: expected a 'pairs' list")
    result = []
    for entry in pairs:
        if not isinstance(entry, dict) or "reference" not in entry:
            raise FormatError(f"{path}: every pair needs a 'reference' box")
        reference = OrientedBox.from_dict(entry["reference"])
        predicted = OrientedBox.from_dict(entry["predicted"]) if "predicted" in entry else reference
        result.append((reference, predicted))
    return result


@dataclass(eq=False)
class BoxKpi:
    reference_points: int
    predicted_points: int
    distribution: DistributionComparison

    def to_dict(self) -> Dict[str, Any]:
        return {
            "reference_points": self.reference_points,
            "predicted_points": self.predicted_points,
            "distribution": self.distribution.to_dict(),
        }

    @classmethod
    def from_dict(cls, content: Dict[str, Any]) -> "BoxKpi":
        return cls(content["reference_points"], content["predicted_points"],
                   DistributionComparison.from_dict(content["distribution"]))


def _box_kpi(a: _Flat, b: _Flat, boxes: Sequence[BoxPair], spec: SensorSpec) -> List[BoxKpi]:
    points_a = to_cartesian(spec, a.layer, a.azimuth_index, a.distance)
    points_b = to_cartesian(spec, b.layer, b.azimuth_index, b.distance)
    result = []
    for box_a, box_b in boxes:
        inside_a, inside_b = box_a.contains(points_a), box_b.contains(points_b)
        result.append(BoxKpi(int(inside_a.sum()), int(inside_b.sum()), compare_epw(a.epw[inside_a], b.epw[inside_b])))
    return result


def box_kpi(a: Trace, b: Trace, boxes: Sequence[BoxPair], spec: SensorSpec) -> List[BoxKpi]:
    """Nonzero-EPW distribution distance of the points inside each box pair (Empty when a side has none)."""
    return _box_kpi(_Flat.of(a), _Flat.of(b), boxes, spec)


@dataclass(eq=False)
class KpiReport:
    """The five KPI families; error statistics are None for unpaired traces."""

    error_stats: Optional[ErrorStats]
    overall: DistributionComparison
    per_class: Dict[str, ClassKpi] = field(default_factory=dict)
    per_box: List[BoxKpi] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "error_statistics": self.error_stats.summary() if self.error_stats else None,
            "error_histogram": self.error_stats.histogram.to_dict() if self.error_stats else None,
            "overall_distribution": self.overall.to_dict(),
            "class_to_class": {name: kpi.to_dict() for name, kpi in self.per_class.items()},
            "box_to_box": [kpi.to_dict() for kpi in self.per_box],
        }

    @classmethod
    def from_dict(cls, content: Dict[str, Any]) -> "KpiReport":
        if tuple(content) != KPI_FAMILIES:
            raise FormatError(f"KPI report must hold exactly {KPI_FAMILIES}, got {tuple(content)}")
        stats = None
        if content["error_statistics"] is not None:
            summary = content["error_statistics"]
            stats = ErrorStats(
                summary["matched"], summary["unmatched_reference"], summary["unmatched_predicted"],
                summary["mean_abs_error_ns"], summary["mse_ns2"], Histogram1D.from_dict(content["error_histogram"]),
            )
        return cls(
            stats,
            DistributionComparison.from_dict(content["overall_distribution"]),
            {name: ClassKpi.from_dict(kpi) for name, kpi in content["class_to_class"].items()},
            [BoxKpi.from_dict(kpi) for kpi in content["box_to_box"]],
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "KpiReport":
        try:
            return cls.from_dict(json.loads(text))
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise FormatError(f"Invalid KPI report: {e}") from e

    def rows(self) -> List[Tuple[str, str, str, Any]]:
        """Flat (family, key, metric, value) rows."""
        rows: List[Tuple[str, str, str, Any]] = []
        if self.error_stats:
            for metric, value in self.error_stats.summary().items():
                rows.append(("error_statistics", "all", metric, value))
        rows.append(("overall_distribution", "all", "wasserstein_ns", self.overall.wasserstein))
        rows.append(("overall_distribution", "all", "intersection", self.overall.intersection))
        for name, kpi in self.per_class.items():
            rows += [
                ("class_to_class", name, "matched", kpi.matched),
                ("class_to_class", name, "mse_ns2", kpi.mse),
                ("class_to_class", name, "wasserstein_ns", kpi.distribution.wasserstein),
                ("class_to_class", name, "intersection", kpi.distribution.intersection),
            ]
        for index, kpi in enumerate(self.per_box):
            rows += [
                ("box_to_box", str(index), "reference_points", kpi.reference_points),
                ("box_to_box", str(index), "predicted_points", kpi.predicted_points),
                ("box_to_box", str(index), "wasserstein_ns", kpi.distribution.wasserstein),
                ("box_to_box", str(index), "intersection", kpi.distribution.intersection),
            ]
        return rows

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["family", "key", "metric", "value"])
        for family, key, metric, value in self.rows():
            writer.writerow([family, key, metric, "" if value is None else value])
        return buffer.getvalue()

    def distances(self) -> List[float]:
        """Every non-Empty Wasserstein distance in the report."""
        found = [self.overall.wasserstein]
        found += [k.distribution.wasserstein for k in self.per_class.values()]
        found += [k.distribution.wasserstein for k in self.per_box]
        return [d for d in found if d is not None]


def full_report(
    reference: Trace,
    predicted: Trace,
    spec: SensorSpec,
    boxes: Optional[Sequence[BoxPair]] = None,
) -> KpiReport:
    """
    Aggregate all KPI families. Traces without shared keys (real vs
    simulated) get a report without paired error statistics.
    """
    ref, pred = _Flat.of(reference), _Flat.of(predicted)
    try:
        stats = _error_stats(ref, pred)
    except DataError:
        logger.info("Traces share no points; reporting distribution KPIs only")
        stats = None
    return KpiReport(
        error_stats=stats,
        overall=compare_epw(ref.epw, pred.epw),
        per_class=_class_kpi(ref, pred),
        per_box=_box_kpi(ref, pred, boxes or [], spec),
    )


def write_report(directory_or_file: Union[str, Path], report: KpiReport) -> Path:
    """
    Write report.json plus report.csv and gnuplot .dat histograms next to it.

    Returns:
        Path: The JSON report path
    """
    target = Path(directory_or_file)
    json_path = target if target.suffix == ".json" else target / "report.json"
    json_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(report.to_json(), encoding="utf-8")
    stem = json_path.with_suffix("")
    Path(f"{stem}.csv").write_text(report.to_csv(), encoding="utf-8")
    Path(f"{stem}_epw_reference.dat").write_text(report.overall.reference.to_gnuplot("reference nonzero EPW"))
    Path(f"{stem}_epw_predicted.dat").write_text(report.overall.predicted.to_gnuplot("predicted nonzero EPW"))
    if report.error_stats:
        Path(f"{stem}_error.dat").write_text(report.error_stats.histogram.to_gnuplot("EPW error (predicted - reference)"))
    return json_path
