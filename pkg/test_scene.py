#!/usr/bin/env python3
"""
LIDAR-EPW - Scene Simulation Test Suite
=======================================

Tests for the synthetic scene module:
- Scene generation and configuration validation
- Reference EPW oracle
- Ray casting geometry (analytic and ray-marching oracles)
- Dataset generation and files

Author: LIDAR-EPW Team
"""

import math
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent))

from lidar_epw.core.frames import cluster_rays
from lidar_epw.core.scene import (
    BeamFootprint,
    DatasetConfig,
    Plane,
    Scene,
    SceneConfig,
    SceneObject,
    build_scene,
    cast_rays,
    load_manifest,
    load_split,
    make_dataset,
    reference_epw,
    save_dataset,
)
from lidar_epw.core.sensor import ClassLabel, SensorSpec, azimuth_centers, ray_directions
from lidar_epw.errors import ConfigurationError, DomainError


class TestBuildScene(unittest.TestCase):
    """Test scene generation."""

    def test_empty_config(self):
        scene = build_scene(SceneConfig.empty(), seed=7)
        self.assertEqual(scene.objects, ())
        self.assertEqual(scene.ground_z, 0.0)

    def test_deterministic(self):
        config = SceneConfig()
        self.assertEqual(build_scene(config, 3), build_scene(config, 3))
        self.assertNotEqual(build_scene(config, 3), build_scene(config, 4))

    def test_exact_counts(self):
        scene = build_scene(SceneConfig(object_counts={"car": (2, 2)}), seed=42)
        self.assertEqual(len(scene.objects), 2)
        self.assertTrue(all(obj.cls == ClassLabel.CAR for obj in scene.objects))

    def test_objects_clear_of_sensor(self):
        config = SceneConfig(object_counts={"pedestrian": (20, 20)}, x_range=(-3.0, 3.0), y_range=(-3.0, 3.0))
        scene = build_scene(config, seed=1)
        for obj in scene.objects:
            self.assertTrue(np.any(np.abs(obj.to_local(scene.origin)) > np.asarray(obj.half_extents)))

    def test_invalid_configs(self):
        with self.assertRaises(ConfigurationError):
            SceneConfig(object_counts={"car": (-1, 2)})
        with self.assertRaises(ConfigurationError):
            SceneConfig(object_counts={"car": (3, 2)})
        with self.assertRaises(ConfigurationError):
            SceneConfig(x_range=(10.0, 5.0))
        with self.assertRaises(ConfigurationError):
            SceneConfig(object_counts={"bus": (1, 1)})
        with self.assertRaises(ConfigurationError):
            SceneObject(ClassLabel.CAR, (1, 0, 0), 0.0, (1.0, 0.0, 1.0), 0.5)

    def test_yaml_config(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "scene.yaml"
            path.write_text("object_counts:\n  truck: [1, 1]\nx_range: [10, 20]\n")
            config = SceneConfig.from_yaml(path)
        self.assertEqual(config.object_counts, {"truck": (1, 1)})
        self.assertEqual(config.x_range, (10.0, 20.0))


class TestReferenceEpw(unittest.TestCase):
    """Test the parametric EPW oracle."""

    def test_documented_values(self):
        self.assertAlmostEqual(reference_epw(ClassLabel.CAR, 1e-9, 1.0, 1.0), 12.0, places=9)
        self.assertEqual(reference_epw(ClassLabel.TRUCK, 30.0, 0.0, 1.0), 0.0)
        self.assertAlmostEqual(reference_epw(ClassLabel.TRUCK, 100.0, 1.0, 1.0), 16.0 * math.exp(-0.5), places=12)
        self.assertAlmostEqual(reference_epw(ClassLabel.TRUCK, 100.0, 1.0, 1.0), 9.7044, places=4)

    def test_domain_errors(self):
        with self.assertRaises(DomainError):
            reference_epw(ClassLabel.CAR, 0.0, 1.0, 1.0)
        with self.assertRaises(DomainError):
            reference_epw(ClassLabel.CAR, 10.0, 1.5, 1.0)
        with self.assertRaises(DomainError):
            reference_epw(ClassLabel.CAR, 10.0, -0.1, 1.0)

    def test_monotonic_on_grid(self):
        """Non-increasing in distance, non-decreasing in incidence and reflectivity."""
        d, c, r = np.meshgrid(
            np.linspace(0.5, 150, 20), np.linspace(0, 1, 20), np.linspace(0, 1, 20), indexing="ij"
        )
        for label in ClassLabel:
            epw = reference_epw(np.full(d.shape, int(label)), d, c, r)
            self.assertTrue(np.all(np.diff(epw, axis=0) <= 1e-12))
            self.assertTrue(np.all(np.diff(epw, axis=1) >= -1e-12))
            self.assertTrue(np.all(np.diff(epw, axis=2) >= -1e-12))

    def test_noise_is_seeded_and_clipped(self):
        a = reference_epw(np.full(100, 5), np.full(100, 1.0), 1.0, 1.0, noise=np.random.default_rng(2))
        b = reference_epw(np.full(100, 5), np.full(100, 1.0), 1.0, 1.0, noise=np.random.default_rng(2))
        self.assertTrue(np.array_equal(a, b))
        self.assertTrue(np.all((a >= 0) & (a <= 50)))


class TestCastRays(unittest.TestCase):
    """Test ray casting geometry."""

    def setUp(self):
        self.spec = SensorSpec.desk()
        self.pencil = BeamFootprint(half_angle_deg=0.0)

    def test_nothing_to_hit(self):
        frame = cast_rays(Scene(ground_z=None), self.spec, self.pencil)
        self.assertEqual(len(frame), 0)

    def test_wall_distances(self):
        """A wall at x = 10 m is hit at 10 / (cos(azimuth) cos(altitude))."""
        scene = Scene(ground_z=None, planes=(Plane((1.0, 0.0, 0.0), 10.0),))
        frame = cast_rays(scene, self.spec, self.pencil, epw_noise_sigma=0.0)
        self.assertEqual(len(frame), self.spec.rows * self.spec.cols)
        directions = ray_directions(self.spec)
        expected = 10.0 / directions[frame.layer, frame.azimuth_index, 0]
        self.assertTrue(np.allclose(frame.distance, expected, rtol=0, atol=1e-9))
        self.assertTrue(np.all(frame.cls == ClassLabel.NONE))
        frame.validate(self.spec)

    def test_grazing_ray_has_two_echoes(self):
        """A beam straddling a car edge sees the car and the wall behind it."""
        edge_az = azimuth_centers(self.spec)[126]
        y_edge = 9.0 * math.tan(math.radians(edge_az))
        car = SceneObject(ClassLabel.CAR, (10.0, y_edge - 1.0, 1.8), 0.0, (1.0, 1.0, 1.0), 0.8)
        scene = Scene(objects=(car,), ground_z=None, planes=(Plane((1.0, 0.0, 0.0), 20.0),))
        frame = cast_rays(scene, self.spec, BeamFootprint(0.2, 5), epw_noise_sigma=0.0)
        on_ray = (frame.layer == 8) & (frame.azimuth_index == 126)
        distances = np.sort(frame.distance[on_ray])
        self.assertEqual(len(distances), 5)
        self.assertGreater(np.max(np.diff(distances)), 0.5)
        self.assertLess(distances[0], 9.2)
        self.assertGreater(distances[-1], 19.9)
        clusters = cluster_rays(frame)
        ray_index = np.flatnonzero((clusters.layer == 8) & (clusters.azimuth_index == 126))
        self.assertEqual(clusters.ray_clusters[ray_index[0]], 2)

    def test_box_matches_ray_marcher(self):
        """Box distances agree with a 1 mm ray marcher within 2 mm."""
        car = SceneObject(ClassLabel.CAR, (8.0, 0.5, 1.5), 0.0, (2.0, 3.0, 2.0), 0.7)
        scene = Scene(objects=(car,), ground_z=None)
        frame = cast_rays(scene, self.spec, self.pencil, epw_noise_sigma=0.0)
        self.assertGreater(len(frame), 1000)
        rng = np.random.default_rng(0)
        chosen = rng.choice(len(frame), size=1000, replace=False)
        directions = ray_directions(self.spec)
        steps = np.arange(0.0, 20.0, 0.001)
        low = np.asarray(car.center) - np.asarray(car.half_extents)
        high = np.asarray(car.center) + np.asarray(car.half_extents)
        for row in chosen:
            direction = directions[frame.layer[row], frame.azimuth_index[row]]
            points = scene.origin + steps[:, None] * direction
            inside = np.all((points >= low) & (points <= high), axis=1)
            marched = steps[np.argmax(inside)]
            self.assertTrue(inside.any())
            self.assertLessEqual(abs(marched - frame.distance[row]), 0.002)


class TestDataset(unittest.TestCase):
    """Test dataset generation and files."""

    def setUp(self):
        self.spec = SensorSpec.desk()
        self.config = DatasetConfig(scene=SceneConfig(object_counts={"car": (1, 3), "pedestrian": (0, 2)}))

    def test_distinct_frames(self):
        train, val = make_dataset(self.config, self.spec, 1, 1, seed=5)
        self.assertEqual(len(train), 1)
        self.assertEqual(len(val), 1)
        self.assertNotEqual(train[0].dense.frame_id, val[0].dense.frame_id)
        for pair in train + val:
            pair.dense.validate(self.spec)
            pair.truth.validate(self.spec)
            self.assertLessEqual(len(pair.truth), self.spec.rows * self.spec.cols * 3)

    def test_requires_frames(self):
        with self.assertRaises(ConfigurationError):
            make_dataset(self.config, self.spec, 0, 1, seed=0)

    def test_files_are_deterministic(self):
        with tempfile.TemporaryDirectory() as tmp:
            outputs = []
            for run in ("a", "b"):
                train, val = make_dataset(self.config, self.spec, 2, 1, seed=9)
                save_dataset(Path(tmp) / run, train, val, self.spec, self.config, 9)
                outputs.append({
                    name: (Path(tmp) / run / name).read_bytes()
                    for name in ("dataset.yaml", "train/dense.jsonl", "train/scan.csv", "val/scan.csv")
                })
            self.assertEqual(outputs[0], outputs[1])

            manifest = load_manifest(Path(tmp) / "a")
            self.assertEqual(manifest["spec"], self.spec)
            self.assertEqual(manifest["n_train"], 2)
            self.assertEqual(manifest["frame_rate_hz"], 25.0)
            loaded = load_split(Path(tmp) / "a" / "train")
            self.assertEqual(len(loaded), 2)
            self.assertTrue(loaded[0].dense.equals(train[0].dense))


if __name__ == "__main__":
    unittest.main()
