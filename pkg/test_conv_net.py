#!/usr/bin/env python3
"""
LIDAR-EPW - Convolutional Network Test Suite
============================================

Tests for the numpy layers and the EPW network variants:
- Layer forward passes against direct loops
- Hand-derived gradients against central differences
- Variant topology, FLOP ordering and checkpoints

Author: LIDAR-EPW Team
"""

import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent))

from lidar_epw.core.conv_net import (
    TrainingHistory,
    Variant,
    backward,
    build_network,
    forward,
    load_checkpoint,
    loss,
    normalize_input,
    save_checkpoint,
)
from lidar_epw.core.layers import Conv2d, ConvTranspose2d, max_pool, max_pool_backward
from lidar_epw.core.pgm import Channel, PolarGridMap
from lidar_epw.core.sensor import SensorSpec
from lidar_epw.errors import CheckpointError, ConfigurationError, DimensionError


def numeric_gradient(f, array, index, h=1e-5):
    """Central difference of f() with respect to array[index]."""
    saved = array[index]
    array[index] = saved + h
    up = f()
    array[index] = saved - h
    down = f()
    array[index] = saved
    return (up - down) / (2 * h)


def agree(numeric, analytic):
    return abs(numeric - analytic) <= 1e-6 + 1e-4 * max(abs(numeric), abs(analytic))


def relative_error(numeric, analytic, floor=1e-4):
    """Relative error; gradients smaller than floor are compared against floor."""
    return abs(numeric - analytic) / max(abs(numeric), abs(analytic), floor)


def kink_margin(net, x):
    """Distance of the forward pass at x from the nearest ReLU kink or max-pool tie."""
    _, tape = net.forward_cached(x)
    pairs = [(conv, cache) for block, caches in zip(net.encoder, tape["encoder"]) for conv, cache in zip(block, caches)]
    pairs += list(zip(net.bottleneck, tape["bottleneck"])) + list(zip(net.ups, tape["ups"]))
    pairs += [(conv, cache) for block, caches in zip(net.decoder, tape["decoder"]) for conv, cache in zip(block, caches)]
    # both layer caches end with the pre-activation
    margin = np.inf
    for layer, cache in pairs:
        if layer.relu:
            step = getattr(layer, "stride", 1)
            margin = min(margin, float(np.abs(cache[-1][:, :, ::step, ::step]).min()))
    if net.variant.skips:
        for caches in tape["encoder"]:
            out = np.maximum(caches[-1][-1], 0.0)
            n, c, rows, cols = out.shape
            windows = np.sort(out.reshape(n, c, rows // 2, 2, cols // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(-1, 4))
            live = windows[:, -1] > 0
            if np.any(live):
                margin = min(margin, float(np.min(windows[live, -1] - windows[live, -2])))
    return margin


class TestLayers(unittest.TestCase):
    """Test the numpy layers."""

    def setUp(self):
        self.rng = np.random.default_rng(0)

    def test_conv_matches_loop(self):
        conv = Conv2d.create(self.rng, 2, 3, kernel=3, relu=False)
        conv.bias = self.rng.normal(size=3)
        x = self.rng.normal(size=(2, 2, 5, 6))
        y, _ = conv.forward(x)
        padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        expected = np.zeros((2, 3, 5, 6))
        for n in range(2):
            for o in range(3):
                for i in range(5):
                    for j in range(6):
                        expected[n, o, i, j] = np.sum(conv.weight[o] * padded[n, :, i:i + 3, j:j + 3]) + conv.bias[o]
        self.assertTrue(np.allclose(y, expected))

    def test_conv_stride_and_relu(self):
        conv = Conv2d.create(self.rng, 2, 4, stride=2)
        y, _ = conv.forward(self.rng.normal(size=(1, 2, 8, 10)))
        self.assertEqual(y.shape, (1, 4, 4, 5))
        self.assertTrue(np.all(y >= 0))
        self.assertEqual(conv.output_size(7, 9), (4, 5))
        with self.assertRaises(DimensionError):
            conv.forward(np.zeros((1, 3, 8, 8)))

    def test_transpose_conv_blocks(self):
        """Every input cell writes its own 2 x 2 output block."""
        up = ConvTranspose2d.create(self.rng, 1, 1)
        x = np.zeros((1, 1, 2, 3))
        x[0, 0, 1, 2] = 1.0
        y, _ = up.forward(x)
        self.assertEqual(y.shape, (1, 1, 4, 6))
        self.assertTrue(np.allclose(y[0, 0, 2:4, 4:6], up.weight[0, 0]))
        self.assertEqual(np.count_nonzero(y), np.count_nonzero(up.weight))

    def test_max_pool(self):
        x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
        pooled, mask = max_pool(x)
        self.assertEqual(pooled[0, 0].tolist(), [[5.0, 7.0], [13.0, 15.0]])
        grad = max_pool_backward(np.ones((1, 1, 2, 2)), mask)
        self.assertEqual(grad.sum(), 4.0)
        self.assertEqual(grad[0, 0, 1, 1], 1.0)
        self.assertEqual(grad[0, 0, 0, 0], 0.0)
        with self.assertRaises(DimensionError):
            max_pool(np.zeros((1, 1, 3, 4)))

    def test_layer_gradients(self):
        """Conv and transpose-conv gradients match central differences."""
        for layer, shape in (
            (Conv2d.create(self.rng, 2, 3, relu=False), (1, 2, 4, 6)),
            (Conv2d.create(self.rng, 2, 3, stride=2, relu=False), (1, 2, 4, 6)),
            (ConvTranspose2d.create(self.rng, 2, 3), (1, 2, 3, 3)),
        ):
            x = self.rng.normal(size=shape)
            out, cache = layer.forward(x)
            upstream = self.rng.normal(size=out.shape)
            d_x, d_w, d_b = layer.backward(upstream, cache)

            def objective():
                return float(np.sum(layer.forward(x)[0] * upstream))

            for index in [(0, 1, 2, 1), (0, 0, 0, 0)]:
                self.assertTrue(agree(numeric_gradient(objective, x, index), d_x[index]))
            for index in [(1, 0, 1, 1), (0, 1, 0, 0)]:
                self.assertTrue(agree(numeric_gradient(objective, layer.weight, index), d_w[index]))
            self.assertTrue(agree(numeric_gradient(objective, layer.bias, (2,)), d_b[2]))


class TestVariants(unittest.TestCase):
    """Test network topology per variant."""

    def test_output_shape(self):
        x = np.random.default_rng(1).uniform(size=(2, 2, 8, 16))
        for variant in Variant:
            net = build_network(variant, base_channels=4, seed=0)
            self.assertEqual(net.forward(x).shape, (2, 1, 8, 16), variant.value)

    def test_input_checks(self):
        net = build_network("tiny", base_channels=2)
        with self.assertRaises(DimensionError):
            net.forward(np.zeros((1, 2, 8, 12)))
        with self.assertRaises(DimensionError):
            net.forward(np.zeros((1, 3, 8, 8)))
        with self.assertRaises(ConfigurationError):
            build_network("unet", base_channels=0)
        with self.assertRaises(ValueError):
            build_network("resnet")

    def test_seeded_initialization(self):
        a, b, c = build_network("unet", 4, seed=5), build_network("unet", 4, seed=5), build_network("unet", 4, seed=6)
        self.assertTrue(all(np.array_equal(u, v) for u, v in zip(a.weights(), b.weights())))
        self.assertFalse(all(np.array_equal(u, v) for u, v in zip(a.weights(), c.weights())))
        self.assertTrue(all(np.all(layer.bias == 0) for layer in a.layers))

    def test_flop_ordering(self):
        """Full variants cost more than their LF and lighter counterparts."""
        flops = {v: build_network(v, base_channels=16).flops(16, 1160) for v in Variant}
        self.assertGreater(flops[Variant.UNET], flops[Variant.TINY_UNET])
        self.assertGreater(flops[Variant.TINY_UNET], flops[Variant.CAE])
        for full, light in ((Variant.UNET, Variant.UNET_LF), (Variant.TINY_UNET, Variant.TINY_UNET_LF),
                            (Variant.CAE, Variant.CAE_LF)):
            self.assertGreater(flops[full], flops[light])
            self.assertGreater(build_network(full).parameter_count, build_network(light).parameter_count)

    def test_ablated_bottleneck(self):
        """Without skips, zeroing the bottleneck makes the output input-independent."""
        rng = np.random.default_rng(2)
        x1, x2 = rng.uniform(size=(1, 2, 8, 8)), rng.uniform(size=(1, 2, 8, 8))
        cae = build_network("cae", 4)
        self.assertTrue(np.allclose(cae.forward(x1, ablate_bottleneck=True), cae.forward(x2, ablate_bottleneck=True)))
        unet = build_network("unet", 4)
        self.assertFalse(np.allclose(unet.forward(x1, ablate_bottleneck=True), unet.forward(x2, ablate_bottleneck=True)))

    def test_variant_codes(self):
        for variant in Variant:
            self.assertIs(Variant.from_code(variant.code), variant)
        with self.assertRaises(CheckpointError):
            Variant.from_code(len(Variant))


class TestLossAndGradients(unittest.TestCase):
    """Test the loss and whole-network gradients."""

    def test_loss_terms(self):
        pred, target = np.array([1.0, 3.0]), np.array([0.0, 1.0])
        self.assertAlmostEqual(loss(pred, target), 2.5)
        self.assertAlmostEqual(loss(pred, target, [np.array([2.0])], lam=0.5), 2.5 + 0.25 * 4.0)
        with self.assertRaises(DimensionError):
            loss(pred, np.zeros(3))

    def test_network_gradients(self):
        """Every parameter of every variant agrees with central differences."""
        rng = np.random.default_rng(7)
        x = rng.uniform(size=(1, 2, 8, 8))
        target = rng.uniform(size=(1, 1, 8, 8))
        lam = 1e-2
        for variant in Variant:
            net = build_network(variant, base_channels=2, seed=3)
            for _ in range(200):
                for layer in net.layers:
                    layer.bias = rng.normal(0.0, 0.5, size=layer.bias.shape)
                if kink_margin(net, x) > 1e-3:
                    break
            self.assertGreater(kink_margin(net, x), 1e-3, variant.value)
            _, grads = backward(net, x, target, lam)

            def objective():
                return loss(net.forward(x), target, net, lam)

            mismatches = []
            for number, (layer, (d_w, d_b)) in enumerate(zip(net.layers, grads)):
                for name, array, analytic in (("weight", layer.weight, d_w), ("bias", layer.bias, d_b)):
                    for index in np.ndindex(array.shape):
                        error = relative_error(numeric_gradient(objective, array, index), analytic[index])
                        if error >= 1e-4:
                            mismatches.append((number, name, index, error))
            self.assertEqual(mismatches, [], variant.value)


class TestInferenceAndCheckpoints(unittest.TestCase):
    """Test map inference and checkpoint files."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = Path(self.tmp.name) / "tiny_echo0.epwm"
        self.net = build_network("tiny-lf", base_channels=4, seed=1)
        self.net.history = TrainingHistory([0.5, 0.25], [0.7, 0.6])

    def tearDown(self):
        self.tmp.cleanup()

    def test_forward_map(self):
        spec = SensorSpec.desk()
        data = np.zeros((2,) + spec.shape)
        data[0, 3, 7], data[1, 3, 7] = 40.0, 1.0
        epw = forward(self.net, PolarGridMap(data), spec)
        self.assertEqual(epw.semantics, (Channel.EPW,))
        self.assertEqual(epw.data.shape, (1,) + spec.shape)
        normalized = normalize_input(data[None], spec)
        self.assertAlmostEqual(normalized[0, 0, 3, 7], 40.0 / 150.0)
        self.assertAlmostEqual(normalized[0, 1, 3, 7], 0.2)
        with self.assertRaises(DimensionError):
            forward(self.net, PolarGridMap(np.zeros((2, 16, 1160))), spec)

    def test_round_trip(self):
        save_checkpoint(self.path, self.net)
        loaded = load_checkpoint(self.path)
        self.assertIs(loaded.variant, Variant.TINY_UNET_LF)
        self.assertEqual(loaded.history, self.net.history)
        for a, b in zip(loaded.layers, self.net.layers):
            self.assertTrue(np.array_equal(a.weight, b.weight))
            self.assertTrue(np.array_equal(a.bias, b.bias))
        x = np.random.default_rng(0).uniform(size=(1, 2, 8, 8))
        self.assertTrue(np.array_equal(loaded.forward(x), self.net.forward(x)))

    def test_corrupt_checkpoints(self):
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path)
        save_checkpoint(self.path, self.net)
        raw = self.path.read_bytes()
        for broken in (b"XXXX" + raw[4:], raw[:-12], raw + b"\0"):
            self.path.write_bytes(broken)
            with self.assertRaises(CheckpointError):
                load_checkpoint(self.path)


if __name__ == "__main__":
    unittest.main()
