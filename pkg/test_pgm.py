#!/usr/bin/env python3
"""
LIDAR-EPW - Polar Grid Map Test Suite
=====================================

Tests for PGM encoding, decoding and the PGM1 file format.

Author: LIDAR-EPW Team
"""

import struct
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent))

from lidar_epw.core.frames import DenseFrame, DenseSample, ScanFrame, ScanPoint
from lidar_epw.core.pgm import (
    Channel,
    PolarGridMap,
    decode,
    encode,
    encode_dense,
    read_pgm,
    stack_inputs,
    write_pgm,
)
from lidar_epw.core.sensor import ClassLabel, SensorSpec
from lidar_epw.errors import DataError, DimensionError, FormatError


def random_frame(rng: np.random.Generator, spec: SensorSpec, frame_id: int, echo: int = 0) -> ScanFrame:
    """Random single-echo frame with one point on a random subset of cells."""
    n = int(rng.integers(0, 200))
    cells = rng.choice(spec.rows * spec.cols, size=n, replace=False)
    return ScanFrame(
        frame_id,
        cells // spec.cols,
        cells % spec.cols,
        np.full(n, echo),
        rng.uniform(0.1, spec.max_range, size=n),
        rng.uniform(0.0, 50.0, size=n),
        rng.integers(0, 6, size=n),
    )


class TestEncodeDecode(unittest.TestCase):
    """Test encode / decode."""

    def setUp(self):
        self.spec = SensorSpec.desk()

    def test_round_trip_random_frames(self):
        """decode(encode(f)) == f and encode is stable through decode."""
        rng = np.random.default_rng(11)
        for frame_id in range(1000):
            echo = frame_id % 3
            frame = random_frame(rng, self.spec, frame_id, echo)
            pgm = encode(frame, self.spec, echo)
            epw = np.zeros(self.spec.shape)
            epw[frame.layer, frame.azimuth_index] = frame.epw
            decoded = decode(pgm, epw, self.spec, echo, frame_id)
            self.assertTrue(decoded.equals(frame))
            self.assertTrue(encode(decoded, self.spec, echo).equals(pgm))

    def test_encode_selects_echo(self):
        frame = ScanFrame.from_points(0, [
            ScanPoint(1, 2, 0, 10.0, 3.0, ClassLabel.CAR),
            ScanPoint(1, 2, 1, 25.0, 2.0, ClassLabel.NONE),
        ])
        pgm = encode(frame, self.spec, 1)
        self.assertEqual(pgm.channel(Channel.DISTANCE)[1, 2], 25.0)
        self.assertEqual(np.count_nonzero(pgm.channel(Channel.DISTANCE)), 1)
        self.assertEqual(np.count_nonzero(encode(frame, self.spec, 2).data), 0)

    def test_encode_rejects_duplicates(self):
        point = ScanPoint(0, 0, 0, 10.0, 1.0, ClassLabel.CAR)
        with self.assertRaises(DataError):
            encode(ScanFrame.from_points(0, [point, point]), self.spec, 0)

    def test_encode_rejects_out_of_grid(self):
        frame = ScanFrame.from_points(0, [ScanPoint(0, 400, 0, 10.0, 1.0, ClassLabel.CAR)])
        with self.assertRaises(DimensionError):
            encode(frame, self.spec, 0)

    def test_decode_rejects_bad_cells(self):
        data = np.zeros((2,) + self.spec.shape)
        data[0, 0, 0] = -1.0
        with self.assertRaises(DataError):
            decode(PolarGridMap(data), np.zeros(self.spec.shape), self.spec, 0)
        data[0, 0, 0] = 5.0
        data[1, 0, 0] = 2.5
        with self.assertRaises(DataError):
            decode(PolarGridMap(data), np.zeros(self.spec.shape), self.spec, 0)
        data[1, 0, 0] = 7.0
        with self.assertRaises(DataError):
            decode(PolarGridMap(data), np.zeros(self.spec.shape), self.spec, 0)

    def test_decode_dimension_mismatch(self):
        pgm = PolarGridMap(np.zeros((2, 16, 1160)))
        with self.assertRaises(DimensionError):
            decode(pgm, np.zeros((16, 1160)), self.spec, 0)

    def test_encode_dense(self):
        """Dense input uses cluster minimum distance and majority class."""
        samples = [
            DenseSample(4, 8, 0, 12.0, ClassLabel.PEDESTRIAN, 1.0, 3.0),
            DenseSample(4, 8, 1, 12.2, ClassLabel.PEDESTRIAN, 1.0, 3.0),
            DenseSample(4, 8, 2, 30.0, ClassLabel.NONE, 1.0, 1.0),
        ]
        frame = DenseFrame.from_samples(0, samples)
        first, second = encode_dense(frame, self.spec, 0), encode_dense(frame, self.spec, 1)
        self.assertEqual(first.data[:, 4, 8].tolist(), [12.0, ClassLabel.PEDESTRIAN])
        self.assertEqual(second.data[:, 4, 8].tolist(), [30.0, ClassLabel.NONE])
        batch = stack_inputs([first, second], self.spec)
        self.assertEqual(batch.shape, (2, 2) + self.spec.shape)


class TestPgmFile(unittest.TestCase):
    """Test the PGM1 binary format."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = Path(self.tmp.name) / "map.pgm"

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip(self):
        data = np.zeros((3, 16, 232))
        data[0, 3, 4], data[1, 3, 4], data[2, 3, 4] = 12.5, 2.0, 7.25
        pgm = PolarGridMap(data, (Channel.DISTANCE, Channel.CLASS, Channel.EPW))
        write_pgm(self.path, pgm)
        self.assertTrue(read_pgm(self.path).equals(pgm))

    def test_bad_magic(self):
        write_pgm(self.path, PolarGridMap(np.zeros((2, 4, 8))))
        raw = bytearray(self.path.read_bytes())
        raw[:4] = b"XXXX"
        self.path.write_bytes(bytes(raw))
        with self.assertRaises(FormatError):
            read_pgm(self.path)

    def test_truncated(self):
        write_pgm(self.path, PolarGridMap(np.zeros((2, 4, 8))))
        self.path.write_bytes(self.path.read_bytes()[:-4])
        with self.assertRaises(FormatError):
            read_pgm(self.path)
        self.path.write_bytes(b"PGM1")
        with self.assertRaises(FormatError):
            read_pgm(self.path)

    def test_unsupported_version(self):
        self.path.write_bytes(struct.pack("<4sIIII", b"PGM1", 9, 2, 4, 8))
        with self.assertRaises(FormatError):
            read_pgm(self.path)


if __name__ == "__main__":
    unittest.main()
