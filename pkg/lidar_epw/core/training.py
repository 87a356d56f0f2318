"""
LIDAR-EPW Training
==================

Training protocol and inference helpers for the EPW networks:
- TrainConfig and per-echo training tensors built from paired frames
- Plain mini-batch SGD with seeded shuffling and early stopping on val L1
- predict_frame / predict_sample_epw: EPW inference on dense frames
- bench: MSE, accuracy and latency table over trained variants

Author: LIDAR-EPW Team
"""

import logging
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from ..errors import ConfigurationError, DataError, DimensionError
from .conv_net import EpwNetwork, backward, normalize_input
from .frames import CLUSTER_GAP_M, DenseFrame, ScanFrame, cluster_rays
from .pgm import Channel, PolarGridMap, decode, encode_dense, stack_inputs
from .scene import FramePair
from .sensor import SensorSpec

logger = logging.getLogger(__name__)

ACCURACY_TOLERANCE_NS = 1.0

Networks = Union[EpwNetwork, Sequence[EpwNetwork]]
EpochCallback = Callable[[int, float, float], None]


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings."""

    batch_size: int = 8
    learning_rate: float = 1e-5
    max_epochs: int = 350
    lam: float = 1e-4
    patience: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.max_epochs < 1:
            raise ConfigurationError("max_epochs must be >= 1")
        if self.lam < 0:
            raise ConfigurationError("lambda must be non-negative")
        if not 0 <= self.patience < self.max_epochs:
            raise ConfigurationError("patience must lie in [0, max_epochs)")


@dataclass(eq=False)
class EchoTensors:
    """Normalized network inputs (N, 2, rows, cols) and EPW targets (N, 1, rows, cols) for one echo."""

    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.inputs)


def target_map(truth: ScanFrame, spec: SensorSpec, echo: int) -> np.ndarray:
    """(rows, cols) EPW grid of one echo of a ground-truth scan."""
    points = truth.for_echo(echo)
    grid = np.zeros(spec.shape)
    grid[points.layer, points.azimuth_index] = points.epw
    return grid


def echo_tensors(pairs: Sequence[FramePair], spec: SensorSpec, echo: int, gap: float = CLUSTER_GAP_M) -> EchoTensors:
    """Training tensors of one echo index from paired (dense, truth) frames."""
    if not pairs:
        raise DataError("Cannot build training tensors from an empty dataset")
    maps = [encode_dense(pair.dense, spec, echo, gap) for pair in pairs]
    inputs = normalize_input(stack_inputs(maps, spec), spec)
    targets = np.stack([target_map(pair.truth, spec, echo) for pair in pairs])[:, None]
    return EchoTensors(inputs, targets)


def mean_abs_error(net: EpwNetwork, data: EchoTensors, batch_size: int = 8) -> float:
    """L1 over all cells of a tensor set."""
    total = 0.0
    for start in range(0, len(data), batch_size):
        pred = net.forward(data.inputs[start:start + batch_size])
        total += float(np.abs(pred - data.targets[start:start + batch_size]).sum())
    return total / data.targets.size


def train(
    net: EpwNetwork,
    dataset: EchoTensors,
    val_set: Optional[EchoTensors],
    config: TrainConfig,
    on_epoch: Optional[EpochCallback] = None,
) -> EpwNetwork:
    """
    Train with plain SGD and early stopping on validation L1.

    The network is updated in place and left holding its best-val-L1
    parameters; per-epoch (train loss, val L1) are appended to net.history.

    Args:
        net: Network to train
        dataset: Training tensors (non-empty)
        val_set: Validation tensors; the training set is used when empty
        config: Training configuration
        on_epoch: Optional callback (epoch, train loss, val L1)

    Returns:
        EpwNetwork: The trained network
    """
    if len(dataset) == 0:
        raise DataError("Cannot train on an empty dataset")
    if val_set is None or len(val_set) == 0:
        val_set = dataset
    if dataset.inputs.shape[1:] != val_set.inputs.shape[1:]:
        raise DimensionError(f"Train frames {dataset.inputs.shape[1:]} and val frames {val_set.inputs.shape[1:]} differ")
    net.check_input(dataset.inputs[:1])

    rng = np.random.default_rng(config.seed)
    layers = net.layers
    best_l1 = np.inf
    best_parameters = [(layer.weight.copy(), layer.bias.copy()) for layer in layers]
    waited = 0
    n = len(dataset)
    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            value, grads = backward(net, dataset.inputs[batch], dataset.targets[batch], config.lam)
            epoch_loss += value * len(batch)
            for layer, (d_weight, d_bias) in zip(layers, grads):
                layer.weight -= config.learning_rate * d_weight
                layer.bias -= config.learning_rate * d_bias
        train_loss = epoch_loss / n
        val_l1 = mean_abs_error(net, val_set, config.batch_size)
        net.history.append(train_loss, val_l1)
        logger.debug(f"{net.variant.value} epoch {epoch + 1}: train loss {train_loss:.6f}, val L1 {val_l1:.6f}")
        if on_epoch:
            on_epoch(epoch + 1, train_loss, val_l1)
        if val_l1 < best_l1:
            best_l1 = val_l1
            best_parameters = [(layer.weight.copy(), layer.bias.copy()) for layer in layers]
            waited = 0
        else:
            waited += 1
            if waited > config.patience:
                logger.info(f"Early stop after epoch {epoch + 1}: val L1 did not improve for {waited} epochs")
                break
    net.set_parameters(best_parameters)
    logger.info(f"Trained {net.variant.value} for {net.history.epochs} epochs, best val L1 {best_l1:.6f}")
    return net


def _per_echo(nets: Networks, spec: SensorSpec) -> List[EpwNetwork]:
    if isinstance(nets, EpwNetwork):
        return [nets] * spec.max_echoes
    nets = list(nets)
    if len(nets) != spec.max_echoes:
        raise ConfigurationError(f"Expected {spec.max_echoes} per-echo networks, got {len(nets)}")
    return nets


def predict_maps(net: EpwNetwork, maps: Sequence[PolarGridMap], spec: SensorSpec) -> np.ndarray:
    """
    EPW grids (N, rows, cols) for raw (Distance, Class) maps; cells with
    zero distance are masked to 0 and EPW is clipped at 0.
    """
    raw = stack_inputs(maps, spec)
    epw = net.forward(normalize_input(raw, spec))[:, 0]
    return np.where(raw[:, 0] > 0, np.maximum(epw, 0.0), 0.0)


def predict_frame(nets: Networks, frame: DenseFrame, spec: SensorSpec, gap: float = CLUSTER_GAP_M) -> ScanFrame:
    """
    Cluster-level EPW inference: encode_dense per echo, forward, decode.

    Returns:
        ScanFrame: One point per echo cluster (cluster minimum distance,
        majority class) carrying the predicted EPW
    """
    if len(frame) == 0:
        return ScanFrame.empty(frame.frame_id)
    parts = []
    for echo, net in enumerate(_per_echo(nets, spec)):
        pgm = encode_dense(frame, spec, echo, gap)
        if not np.any(pgm.channel(Channel.DISTANCE)):
            continue
        epw = predict_maps(net, [pgm], spec)[0]
        parts.append(decode(pgm, epw, spec, echo, frame.frame_id))
    return ScanFrame.concat(frame.frame_id, parts)


def predict_sample_epw(nets: Networks, frame: DenseFrame, spec: SensorSpec, gap: float = CLUSTER_GAP_M) -> np.ndarray:
    """
    Per-sample EPW inference: one input map per (echo, sub-ray), so every
    dense sample of the first max_echoes clusters gets its own prediction.

    Returns:
        np.ndarray: Predicted EPW aligned with the frame rows (0 for samples
        beyond the last echo)
    """
    result = np.zeros(len(frame))
    if len(frame) == 0:
        return result
    clusters = cluster_rays(frame, gap, spec.max_echoes)
    sub_rays = np.unique(frame.sub_ray)
    for echo, net in enumerate(_per_echo(nets, spec)):
        in_echo = clusters.sample_echo == echo
        if not np.any(in_echo):
            continue
        maps, rows = [], []
        for sub in sub_rays:
            chosen = np.flatnonzero(in_echo & (frame.sub_ray == sub))
            if len(chosen) == 0:
                continue
            data = np.zeros((2,) + spec.shape)
            data[0, frame.layer[chosen], frame.azimuth_index[chosen]] = frame.distance[chosen]
            data[1, frame.layer[chosen], frame.azimuth_index[chosen]] = frame.cls[chosen]
            maps.append(PolarGridMap(data))
            rows.append(chosen)
        grids = predict_maps(net, maps, spec)
        for grid, chosen in zip(grids, rows):
            result[chosen] = grid[frame.layer[chosen], frame.azimuth_index[chosen]]
    return result


def accuracy(pred: np.ndarray, target: np.ndarray, tolerance: float = ACCURACY_TOLERANCE_NS) -> float:
    """Percentage of cells with |pred - target| <= tolerance."""
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise DimensionError(f"Prediction shape {pred.shape} does not match target shape {target.shape}")
    if pred.size == 0:
        return 100.0
    return 100.0 * float(np.mean(np.abs(pred - target) <= tolerance))


@dataclass(frozen=True)
class BenchRow:
    variant: str
    mse: float
    accuracy: float
    latency_ms: float
    flops: int
    parameters: int


def bench(
    models: Dict[str, Sequence[EpwNetwork]],
    val_sets: Sequence[EchoTensors],
    repetitions: int = 10,
    tolerance: float = ACCURACY_TOLERANCE_NS,
) -> List[BenchRow]:
    """
    Benchmark trained per-echo networks of several variants.

    MSE (ns^2) and accuracy are taken over all cells of all echoes; latency
    is the median wall-clock time of one single-frame forward pass.
    """
    if repetitions < 1:
        raise ConfigurationError("repetitions must be >= 1")
    rows = []
    for name, nets in models.items():
        squared, hits, cells = 0.0, 0, 0
        for net, data in zip(nets, val_sets):
            pred = np.concatenate([net.forward(data.inputs[i:i + 8]) for i in range(0, len(data), 8)])
            squared += float(np.sum((pred - data.targets) ** 2))
            hits += int(np.sum(np.abs(pred - data.targets) <= tolerance))
            cells += data.targets.size
        sample = val_sets[0].inputs[:1]
        timings = []
        for _ in range(repetitions):
            started = time.perf_counter()
            nets[0].forward(sample)
            timings.append(time.perf_counter() - started)
        rows.append(BenchRow(
            variant=name,
            mse=squared / cells,
            accuracy=100.0 * hits / cells,
            latency_ms=1000.0 * float(np.median(timings)),
            flops=nets[0].flops(sample.shape[2], sample.shape[3]),
            parameters=nets[0].parameter_count,
        ))
        logger.info(f"Bench {name}: MSE {rows[-1].mse:.4f} ns^2, latency {rows[-1].latency_ms:.2f} ms")
    return rows
