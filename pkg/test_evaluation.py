#!/usr/bin/env python3
"""
LIDAR-EPW - Evaluation Test Suite
=================================

Tests for the KPI suite:
- Histogram distances against a CDF oracle
- Paired error statistics, class and box breakdowns
- Report assembly and JSON / CSV / gnuplot emission

Author: LIDAR-EPW Team
"""

import json
import math
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent))

from lidar_epw.core.evaluation import (
    EPW_EDGES,
    KPI_FAMILIES,
    Histogram1D,
    KpiReport,
    OrientedBox,
    box_kpi,
    class_kpi,
    compare_epw,
    epw_error_stats,
    full_report,
    histogram_intersection,
    histogram_wasserstein,
    load_box_pairs,
    write_report,
)
from lidar_epw.core.frames import ScanFrame, ScanPoint
from lidar_epw.core.sensor import ClassLabel, SensorSpec, to_cartesian
from lidar_epw.errors import ConfigurationError, DataError, FormatError


def cdf_wasserstein(a: Histogram1D, b: Histogram1D) -> float:
    """Sum of |F_a - F_b| times the spacing between consecutive bin centers."""
    cdf_a = np.cumsum(a.normalized())
    cdf_b = np.cumsum(b.normalized())
    return float(np.sum(np.abs(cdf_a - cdf_b)[:-1] * np.diff(a.centers)))


def trace(*frames):
    return [ScanFrame.from_points(frame_id, points) for frame_id, points in frames]


class TestHistograms(unittest.TestCase):
    """Test histogram distances."""

    def test_wasserstein_matches_cdf_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            a = Histogram1D(EPW_EDGES, rng.integers(0, 5, size=100) * (rng.uniform(size=100) < 0.3))
            b = Histogram1D(EPW_EDGES, rng.integers(0, 5, size=100) * (rng.uniform(size=100) < 0.3))
            if a.total == 0 or b.total == 0:
                continue
            self.assertAlmostEqual(histogram_wasserstein(a, b), cdf_wasserstein(a, b), places=9)

    def test_shifted_point_masses(self):
        a = Histogram1D.of([10.1], EPW_EDGES)
        b = Histogram1D.of([12.6], EPW_EDGES)
        self.assertAlmostEqual(histogram_wasserstein(a, b), 2.5)
        self.assertEqual(histogram_intersection(a, b), 0.0)
        self.assertEqual(histogram_intersection(a, a), 1.0)

    def test_empty_sides(self):
        empty = Histogram1D.of([], EPW_EDGES)
        full = Histogram1D.of([3.0], EPW_EDGES)
        self.assertIsNone(histogram_wasserstein(empty, full))
        self.assertIsNone(histogram_intersection(full, empty))
        with self.assertRaises(ConfigurationError):
            histogram_wasserstein(full, Histogram1D.of([3.0], np.linspace(0, 10, 5)))

    def test_compare_ignores_zero_and_clamps(self):
        comparison = compare_epw(np.array([0.0, 0.0, 60.0]), np.array([49.9]))
        self.assertEqual(comparison.reference.total, 1)
        self.assertEqual(comparison.reference.counts[-1], 1)
        self.assertEqual(comparison.wasserstein, 0.0)
        self.assertTrue(compare_epw(np.zeros(3), np.array([1.0])).empty)

    def test_gnuplot(self):
        text = Histogram1D.of([0.1], np.array([0.0, 1.0, 2.0])).to_gnuplot("epw")
        self.assertEqual(text, "# epw\n# center count\n0.500000 1\n1.500000 0\n")


class TestErrorStats(unittest.TestCase):
    """Test paired statistics and class breakdowns."""

    def setUp(self):
        car, none = ClassLabel.CAR, ClassLabel.NONE
        self.reference = trace((0, [
            ScanPoint(0, 1, 0, 10.0, 1.0, car), ScanPoint(0, 2, 0, 12.0, 2.0, none), ScanPoint(0, 3, 0, 9.0, 3.0, car),
        ]))
        self.predicted = trace((0, [
            ScanPoint(0, 1, 0, 10.0, 2.0, car), ScanPoint(0, 2, 0, 12.0, 4.0, car), ScanPoint(0, 9, 0, 5.0, 0.0, car),
        ]))

    def test_statistics(self):
        stats = epw_error_stats(self.reference, self.predicted)
        self.assertEqual((stats.matched, stats.unmatched_reference, stats.unmatched_predicted), (2, 1, 1))
        self.assertAlmostEqual(stats.mean_abs_error, 1.5)
        self.assertAlmostEqual(stats.mse, 2.5)
        self.assertEqual(stats.histogram.total, 2)

    def test_no_shared_keys(self):
        other = trace((5, [ScanPoint(0, 1, 0, 10.0, 2.0, ClassLabel.CAR)]))
        with self.assertRaises(DataError):
            epw_error_stats(self.reference, other)
        self.assertIsNone(full_report(self.reference, other, SensorSpec.desk()).error_stats)

    def test_duplicate_points(self):
        point = ScanPoint(0, 1, 0, 10.0, 1.0, ClassLabel.CAR)
        with self.assertRaises(DataError):
            epw_error_stats(trace((0, [point, point])), self.predicted)

    def test_large_frame_ids_pair_by_exact_id(self):
        """Frames 2**32 apart are distinct; only equal ids pair up."""
        point = ScanPoint(0, 1, 0, 10.0, 1.0, ClassLabel.CAR)
        shifted = ScanPoint(0, 1, 0, 10.0, 4.0, ClassLabel.CAR)
        reference = trace((0, [point]), (2**32, [point]), (2**63 + 1, [point]))
        predicted = trace((2**32, [shifted]), (2**63 + 1, [point]))
        stats = epw_error_stats(reference, predicted)
        self.assertEqual((stats.matched, stats.unmatched_reference, stats.unmatched_predicted), (2, 1, 0))
        self.assertAlmostEqual(stats.mse, 4.5)

    def test_class_partition_follows_reference(self):
        kpi = class_kpi(self.reference, self.predicted)
        self.assertEqual(sorted(kpi), ["car", "none"])
        self.assertEqual(kpi["car"].matched, 1)
        self.assertAlmostEqual(kpi["car"].mse, 1.0)
        self.assertAlmostEqual(kpi["none"].mse, 4.0)
        self.assertTrue(kpi["none"].distribution.empty)

    def test_identity(self):
        """A trace compared with itself has zero error and full overlap."""
        report = full_report(self.reference, self.reference, SensorSpec.desk())
        self.assertEqual(report.error_stats.mse, 0.0)
        self.assertEqual(report.error_stats.mean_abs_error, 0.0)
        self.assertEqual(report.distances(), [0.0, 0.0, 0.0])
        self.assertEqual(report.overall.intersection, 1.0)
        for kpi in report.per_class.values():
            self.assertEqual(kpi.distribution.intersection, 1.0)


class TestBoxes(unittest.TestCase):
    """Test oriented boxes and box-to-box KPIs."""

    def test_contains_rotated(self):
        box = OrientedBox((10.0, 0.0, 0.0), math.pi / 4, (2.0, 0.5, 1.0))
        along = 10.0 + np.array([1.9, 1.9, 0.0]) / math.sqrt(2)
        across = np.array([9.0, 1.0, 0.0])
        self.assertEqual(box.contains(np.stack([along, across])).tolist(), [True, False])
        with self.assertRaises(ConfigurationError):
            OrientedBox((0, 0, 0), 0.0, (1.0, 0.0, 1.0))

    def test_box_kpi(self):
        spec = SensorSpec.desk()
        center = to_cartesian(spec, np.array([3]), np.array([116]), np.array([20.0]))[0]
        box = OrientedBox(tuple(center), 0.0, (0.5, 0.5, 0.5))
        a = trace((0, [ScanPoint(3, 116, 0, 20.0, 4.0, ClassLabel.CAR), ScanPoint(3, 10, 0, 20.0, 9.0, ClassLabel.CAR)]))
        b = trace((0, [ScanPoint(3, 116, 0, 20.2, 4.0, ClassLabel.CAR)]))
        (kpi,) = box_kpi(a, b, [(box, box)], spec)
        self.assertEqual((kpi.reference_points, kpi.predicted_points), (1, 1))
        self.assertEqual(kpi.distribution.wasserstein, 0.0)
        (empty,) = box_kpi(a, [], [(box, box)], spec)
        self.assertTrue(empty.distribution.empty)

    def test_load_box_pairs(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "boxes.yaml"
            path.write_text(
                "pairs:\n"
                "  - reference: {center: [10, 0, 1], yaw: 0.5, half_extents: [2, 1, 1]}\n"
                "  - reference: {center: [5, 5, 1], half_extents: [1, 1, 1]}\n"
                "    predicted: {center: [5, 6, 1], half_extents: [1, 1, 1]}\n"
            )
            pairs = load_box_pairs(path)
            self.assertEqual(len(pairs), 2)
            self.assertIs(pairs[0][0], pairs[0][1])
            self.assertEqual(pairs[1][1].center, (5.0, 6.0, 1.0))
            path.write_text("boxes: []\n")
            with self.assertRaises(FormatError):
                load_box_pairs(path)


class TestReport(unittest.TestCase):
    """Test report serialization."""

    def setUp(self):
        reference = trace((0, [ScanPoint(0, 1, 0, 10.0, 1.0, ClassLabel.CAR), ScanPoint(0, 2, 0, 11.0, 7.0, ClassLabel.TRUCK)]))
        predicted = trace((0, [ScanPoint(0, 1, 0, 10.0, 1.5, ClassLabel.CAR), ScanPoint(0, 2, 0, 11.0, 6.0, ClassLabel.TRUCK)]))
        box = OrientedBox((0.0, 0.0, 0.0), 0.0, (1.0, 1.0, 1.0))
        self.report = full_report(reference, predicted, SensorSpec.desk(), [(box, box)])

    def test_json_round_trip(self):
        content = json.loads(self.report.to_json())
        self.assertEqual(tuple(content), KPI_FAMILIES)
        self.assertEqual(KpiReport.from_json(self.report.to_json()).to_dict(), self.report.to_dict())

    def test_invalid_json(self):
        with self.assertRaises(FormatError):
            KpiReport.from_json("{")
        content = self.report.to_dict()
        del content["box_to_box"]
        with self.assertRaises(FormatError):
            KpiReport.from_json(json.dumps(content))

    def test_csv(self):
        lines = self.report.to_csv().splitlines()
        self.assertEqual(lines[0], "family,key,metric,value")
        self.assertIn("error_statistics,all,matched,2", lines)
        self.assertIn("box_to_box,0,wasserstein_ns,", lines)

    def test_write_report(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = write_report(Path(tmp) / "kpi", self.report)
            self.assertEqual(path.name, "report.json")
            names = sorted(p.name for p in path.parent.iterdir())
            self.assertEqual(names, [
                "report.csv", "report.json", "report_epw_predicted.dat", "report_epw_reference.dat", "report_error.dat",
            ])
            self.assertEqual(KpiReport.from_json(path.read_text()).to_dict(), self.report.to_dict())


if __name__ == "__main__":
    unittest.main()
