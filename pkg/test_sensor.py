#!/usr/bin/env python3
"""
LIDAR-EPW - Sensor Geometry Test Suite
======================================

Tests for the scanner geometry and class labels:
- ClassLabel codes
- SensorSpec validation and file loading
- angle_to_cell / cell_to_angle binning

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

from lidar_epw.core.sensor import (
    ClassLabel,
    SensorSpec,
    angle_to_cell,
    cell_to_angle,
    check_class_codes,
    ray_directions,
    to_cartesian,
)
from lidar_epw.errors import AngleRangeError, ConfigurationError, DataError


class TestClassLabel(unittest.TestCase):
    """Test class label codes."""

    def test_codes_round_trip(self):
        """Every label survives its integer code."""
        self.assertEqual(len(ClassLabel), 6)
        for label in ClassLabel:
            self.assertIs(ClassLabel.from_code(int(label)), label)
        self.assertEqual(ClassLabel.HIGH_REFLECTIVE, 5)

    def test_invalid_codes_rejected(self):
        """Codes >= 6, negative or fractional codes are data errors."""
        for code in (6, -1, 2.5, "car"):
            with self.assertRaises(DataError):
                ClassLabel.from_code(code)
        with self.assertRaises(DataError):
            check_class_codes(np.array([0, 1, 7]))
        check_class_codes(np.array([0.0, 5.0]))


class TestSensorSpec(unittest.TestCase):
    """Test SensorSpec validation."""

    def test_default_geometry(self):
        """Default spec is 16 x 1160, desk spec is 16 x 232."""
        self.assertEqual(SensorSpec().shape, (16, 1160))
        self.assertEqual(SensorSpec.desk().shape, (16, 232))

    def test_inconsistent_vertical_span(self):
        """n_layers * v_res must match the vertical FOV."""
        with self.assertRaises(ConfigurationError):
            SensorSpec(n_layers=15)

    def test_non_integer_columns(self):
        with self.assertRaises(ConfigurationError):
            SensorSpec(h_res=0.3)

    def test_echo_count_fixed(self):
        with self.assertRaises(ConfigurationError):
            SensorSpec(max_echoes=2)

    def test_json_file(self):
        """Sensor-spec JSON fields mirror the dataclass."""
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "spec.json"
            path.write_text(json.dumps(SensorSpec.desk().to_dict()))
            self.assertEqual(SensorSpec.from_file(path), SensorSpec.desk())
            path.write_text(json.dumps({"n_layers": 16, "colour": "red"}))
            with self.assertRaises(ConfigurationError):
                SensorSpec.from_file(path)


class TestAngleBinning(unittest.TestCase):
    """Test angle_to_cell and cell_to_angle."""

    def setUp(self):
        self.spec = SensorSpec()

    def test_boundaries(self):
        """Lower bounds are inside, upper bounds outside."""
        self.assertEqual(angle_to_cell(self.spec, -72.5, 4.999), (0, 0))
        self.assertEqual(angle_to_cell(self.spec, 72.49, -5.0), (15, 1159))
        with self.assertRaises(AngleRangeError):
            angle_to_cell(self.spec, 72.5, 0.0)
        with self.assertRaises(AngleRangeError):
            angle_to_cell(self.spec, 0.0, 5.0)

    def test_centers_round_trip(self):
        """Every cell center maps back to its own cell."""
        for row in range(self.spec.rows):
            for col in range(0, self.spec.cols, 37):
                azimuth, altitude = cell_to_angle(self.spec, row, col)
                self.assertEqual(angle_to_cell(self.spec, azimuth, altitude), (row, col))

    def test_cell_out_of_grid(self):
        with self.assertRaises(AngleRangeError):
            cell_to_angle(self.spec, 16, 0)

    def test_directions_and_cartesian_agree(self):
        """to_cartesian scales the unit cell directions by range."""
        spec = SensorSpec.desk()
        directions = ray_directions(spec)
        self.assertTrue(np.allclose(np.linalg.norm(directions, axis=-1), 1.0))
        points = to_cartesian(spec, np.array([3]), np.array([100]), np.array([20.0]))
        self.assertTrue(np.allclose(points[0], 20.0 * directions[3, 100]))
        azimuth, altitude = cell_to_angle(spec, 3, 100)
        self.assertAlmostEqual(math.degrees(math.atan2(points[0, 1], points[0, 0])), azimuth)
        self.assertAlmostEqual(math.degrees(math.asin(points[0, 2] / 20.0)), altitude)


if __name__ == "__main__":
    unittest.main()
