"""
LIDAR-EPW Echo Selection
========================

Second stage of the sensor model: a histogram Bayes classifier that turns
a dense ray profile with predicted EPWs into up to three realistic scan
points per ray.

Per ray:
1. cluster the samples by distance gaps
2. pick the echo count k from P(k | yaw bin, leading class), capped by the
   available clusters
3. for each of the k nearest clusters, pick one representative sample by
   offset prior x EPW likelihood

Author: LIDAR-EPW Team
"""

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..config import thread_count
from ..errors import CheckpointError, ConfigurationError, FitError, FormatError
from .conv_net import EpwNetwork, Variant, load_checkpoint
from .frames import CLUSTER_GAP_M, DenseFrame, EchoClusters, ScanFrame, cluster_rays, point_keys
from .lut_model import EpwLut, QueryMode, bin_stats, predict_epw, read_lut
from .scene import FramePair
from .sensor import MAX_ECHOES, NUM_CLASSES, SensorSpec, azimuth_centers
from .training import predict_sample_epw

logger = logging.getLogger(__name__)

EHST_MAGIC = b"EHST"
EHST_VERSION = 1
_EHST_HEADER = struct.Struct("<4sIIII")
ECHO_COUNTS = MAX_ECHOES + 1


class SelectionMode(Enum):
    ARGMAX = "argmax"
    SAMPLE = "sample"


@dataclass(frozen=True)
class SelectionConfig:
    gap: float = CLUSTER_GAP_M
    mode: SelectionMode = SelectionMode.ARGMAX
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", SelectionMode(self.mode))
        if not self.gap > 0:
            raise ConfigurationError(f"Cluster gap must be positive, got {self.gap}")


def _default_edges(low: float, high: float, step: float) -> np.ndarray:
    return np.linspace(low, high, int(round((high - low) / step)) + 1)


def _bins(edges: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Bin index with values clamped into the covered range."""
    index = np.searchsorted(edges, values, side="right") - 1
    return np.clip(index, 0, len(edges) - 2)


@dataclass(eq=False)
class EchoOccurrenceHist:
    """
    Echo-count counts per (yaw bin, leading class, k in 0..3) and
    positional-offset counts per (distance bin, offset bin).
    """

    yaw_edges: np.ndarray = field(default_factory=lambda: _default_edges(-72.5, 72.5, 5.0))
    distance_edges: np.ndarray = field(default_factory=lambda: _default_edges(0.0, 150.0, 5.0))
    offset_edges: np.ndarray = field(default_factory=lambda: _default_edges(0.0, 1.0, 0.05))
    counts: Optional[np.ndarray] = None
    offset_counts: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("yaw_edges", "distance_edges", "offset_edges"):
            edges = np.asarray(getattr(self, name), dtype=np.float64)
            if len(edges) < 2 or np.any(np.diff(edges) <= 0):
                raise ConfigurationError(f"{name} must hold at least 2 strictly ascending values")
            setattr(self, name, edges)
        count_shape = (len(self.yaw_edges) - 1, NUM_CLASSES, ECHO_COUNTS)
        offset_shape = (len(self.distance_edges) - 1, len(self.offset_edges) - 1)
        self.counts = np.zeros(count_shape) if self.counts is None else np.asarray(self.counts, dtype=np.float64)
        self.offset_counts = (
            np.zeros(offset_shape) if self.offset_counts is None else np.asarray(self.offset_counts, dtype=np.float64)
        )
        if self.counts.shape != count_shape or self.offset_counts.shape != offset_shape:
            raise FormatError("Histogram tables do not match their bin edges")

    @property
    def probabilities(self) -> np.ndarray:
        """
        P(k | yaw bin, class); empty bins are uniform over k = 0..3.

        Selection narrows an empty bin to its feasible counts 0..n_clusters:
        Sample mode draws k uniformly from them, Argmax mode breaks the flat
        tie toward the largest one and keeps every cluster.
        """
        totals = self.counts.sum(axis=-1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(totals > 0, self.counts / np.maximum(totals, 1e-300), 1.0 / ECHO_COUNTS)

    @property
    def empty(self) -> np.ndarray:
        return self.counts.sum(axis=-1) == 0

    @property
    def offset_probabilities(self) -> np.ndarray:
        """Offset distribution per distance bin; empty bins are uniform."""
        totals = self.offset_counts.sum(axis=-1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(
                totals > 0, self.offset_counts / np.maximum(totals, 1e-300), 1.0 / self.offset_counts.shape[-1]
            )

    def yaw_bin(self, yaw: np.ndarray) -> np.ndarray:
        return _bins(self.yaw_edges, np.asarray(yaw, dtype=np.float64))

    def distance_bin(self, distance: np.ndarray) -> np.ndarray:
        return _bins(self.distance_edges, np.asarray(distance, dtype=np.float64))

    def offset_bin(self, offset: np.ndarray) -> np.ndarray:
        return _bins(self.offset_edges, np.maximum(np.asarray(offset, dtype=np.float64), 0.0))


@dataclass(eq=False)
class _RayTable:
    """Per-ray view over the kept clusters of a frame."""

    first: np.ndarray
    n_clusters: np.ndarray
    layer: np.ndarray
    azimuth_index: np.ndarray
    leading_cls: np.ndarray


def _ray_table(clusters: EchoClusters) -> _RayTable:
    first = np.flatnonzero(clusters.echo == 0)
    n_clusters = np.diff(np.append(first, len(clusters)))
    return _RayTable(
        first, n_clusters, clusters.layer[first], clusters.azimuth_index[first], clusters.majority_cls[first],
    )


def fit_echo_hist(
    truth: Iterable[FramePair],
    spec: SensorSpec,
    gap: float = CLUSTER_GAP_M,
    hist: Optional[EchoOccurrenceHist] = None,
) -> EchoOccurrenceHist:
    """
    Count echo multiplicities per (yaw bin, leading class) and selected
    sample offsets per distance bin from paired ground truth.

    Raises:
        FitError: If the pairs hold no rays
    """
    hist = hist or EchoOccurrenceHist()
    centers = azimuth_centers(spec)
    n_rays = 0
    for dense, scan in truth:
        clusters = cluster_rays(dense, gap, spec.max_echoes)
        if len(clusters) == 0:
            continue
        rays = _ray_table(clusters)
        n_rays += len(rays.first)

        ray_keys = point_keys(dense.frame_id, rays.layer, rays.azimuth_index, 0)
        truth_rays, truth_counts = np.unique(
            point_keys(scan.frame_id, scan.layer, scan.azimuth_index, 0), return_counts=True
        )
        k = np.zeros(len(ray_keys), dtype=np.int64)
        _, in_rays, in_truth = np.intersect1d(ray_keys, truth_rays, return_indices=True)
        k[in_rays] = truth_counts[in_truth]
        np.add.at(hist.counts, (hist.yaw_bin(centers[rays.azimuth_index]), rays.leading_cls, np.minimum(k, MAX_ECHOES)), 1)

        cluster_keys = point_keys(dense.frame_id, clusters.layer, clusters.azimuth_index, clusters.echo)
        _, in_clusters, in_scan = np.intersect1d(cluster_keys, scan.keys(), return_indices=True)
        offsets = scan.distance[in_scan] - clusters.min_distance[in_clusters]
        np.add.at(
            hist.offset_counts,
            (hist.distance_bin(clusters.min_distance[in_clusters]), hist.offset_bin(offsets)),
            1,
        )
    if n_rays == 0:
        raise FitError("Cannot fit echo histograms on an empty trace")
    logger.info(f"Fitted echo-occurrence histogram on {n_rays} rays")
    return hist


def _sample_scores(
    frame: DenseFrame,
    clusters: EchoClusters,
    pred_epw: np.ndarray,
    hist: EchoOccurrenceHist,
    lut: Optional[EpwLut],
    spec: SensorSpec,
) -> np.ndarray:
    """Log posterior score per dense row; -inf for rows beyond the kept clusters."""
    kept = clusters.sample_cluster >= 0
    cluster = np.maximum(clusters.sample_cluster, 0)
    offsets = frame.distance - clusters.min_distance[cluster]
    prior = hist.offset_probabilities[hist.distance_bin(clusters.min_distance[cluster]), hist.offset_bin(offsets)]
    with np.errstate(divide="ignore"):
        score = np.log(prior)
    if lut is not None:
        yaw = azimuth_centers(spec)[frame.azimuth_index]
        layer = frame.layer if lut.bins.use_layer else None
        count, mean, std = bin_stats(
            lut, clusters.majority_cls[cluster], clusters.echo[cluster], frame.distance,
            np.clip(yaw, lut.bins.yaw_edges[0], lut.bins.yaw_edges[-1]), layer,
        )
        informative = (count >= 2) & np.isfinite(std) & (std > 0)
        safe_std = np.where(informative, std, 1.0)
        log_likelihood = -0.5 * ((pred_epw - mean) / safe_std) ** 2 - np.log(safe_std) - 0.5 * np.log(2 * np.pi)
        score = score + np.where(informative, log_likelihood, 0.0)
    return np.where(kept, score, -np.inf)


def _argmax_samples(clusters: EchoClusters, scores: np.ndarray) -> np.ndarray:
    """Per kept cluster, the highest-scoring row; the nearest sample wins ties."""
    best = np.empty(len(clusters), dtype=np.int64)
    for c, (start, stop) in enumerate(zip(clusters.start, clusters.stop)):
        best[c] = start + int(np.argmax(scores[start:stop]))
    return best


def _softmax_draw(rng: np.random.Generator, scores: np.ndarray) -> int:
    finite = np.isfinite(scores)
    if not np.any(finite):
        return 0
    weights = np.where(finite, np.exp(scores - scores[finite].max()), 0.0)
    return int(rng.choice(len(scores), p=weights / weights.sum()))


def select_echoes(
    frame: DenseFrame,
    pred_epw: np.ndarray,
    hist: EchoOccurrenceHist,
    config: SelectionConfig,
    spec: SensorSpec,
    lut: Optional[EpwLut] = None,
) -> ScanFrame:
    """
    One-out-of-many selection over every ray of a dense frame.

    Args:
        frame: Dense frame (rows sorted by ray, then distance)
        pred_epw: Predicted EPW per dense row
        hist: Fitted echo-occurrence and offset histograms
        config: Gap, mode and seed; Sample mode derives one random stream
            per ray from (seed, frame_id, layer, azimuth)
        spec: Sensor spec
        lut: Lookup table supplying the EPW likelihood; without it the
            offset prior alone scores the samples

    Returns:
        ScanFrame: Up to max_echoes points per ray; every point repeats one
        dense sample's distance and predicted EPW
    """
    pred_epw = np.asarray(pred_epw, dtype=np.float64)
    if len(pred_epw) != len(frame):
        raise ConfigurationError(f"{len(pred_epw)} EPW predictions for {len(frame)} dense samples")
    clusters = cluster_rays(frame, config.gap, spec.max_echoes)
    if len(clusters) == 0:
        return ScanFrame.empty(frame.frame_id)
    rays = _ray_table(clusters)
    scores = _sample_scores(frame, clusters, pred_epw, hist, lut, spec)
    yaw_bin = hist.yaw_bin(azimuth_centers(spec)[rays.azimuth_index])
    probabilities = hist.probabilities[yaw_bin, rays.leading_cls]
    empty = hist.empty[yaw_bin, rays.leading_cls]

    if config.mode == SelectionMode.ARGMAX:
        # empty bins: flat P(k) over 0..n_clusters, tie broken toward n_clusters
        k = np.where(empty, rays.n_clusters, np.argmax(probabilities, axis=1))
        k = np.minimum(k, rays.n_clusters)
        best = _argmax_samples(clusters, scores)
        echo_index = clusters.echo
        keep = echo_index < np.repeat(k, rays.n_clusters)
        chosen = best[keep]
        kept_clusters = np.flatnonzero(keep)
    else:
        def _select_ray(r: int) -> List[Tuple[int, int]]:
            rng = np.random.default_rng([config.seed, frame.frame_id, int(rays.layer[r]), int(rays.azimuth_index[r])])
            m = int(rays.n_clusters[r])
            if empty[r]:
                k = int(rng.integers(0, m + 1))
            else:
                k = min(int(rng.choice(ECHO_COUNTS, p=probabilities[r])), m)
            picks = []
            for c in range(rays.first[r], rays.first[r] + k):
                start, stop = clusters.start[c], clusters.stop[c]
                picks.append((c, int(start + _softmax_draw(rng, scores[start:stop]))))
            return picks

        workers = thread_count()
        if workers > 1 and len(rays.first) > 1:
            with ThreadPoolExecutor(max_workers=workers) as executor:
                selected = list(executor.map(_select_ray, range(len(rays.first))))
        else:
            selected = [_select_ray(r) for r in range(len(rays.first))]
        flat = [pick for picks in selected for pick in picks]
        kept_clusters = np.array([c for c, _ in flat], dtype=np.int64)
        chosen = np.array([i for _, i in flat], dtype=np.int64)

    return ScanFrame(
        frame.frame_id,
        clusters.layer[kept_clusters],
        clusters.azimuth_index[kept_clusters],
        clusters.echo[kept_clusters],
        frame.distance[chosen],
        pred_epw[chosen],
        clusters.majority_cls[kept_clusters],
    )


Backend = Union[EpwLut, EpwNetwork, Sequence[EpwNetwork]]


def predict_dense_epw(
    frame: DenseFrame,
    backend: Backend,
    spec: SensorSpec,
    config: SelectionConfig,
) -> np.ndarray:
    """Predicted EPW per dense row from a lookup table or per-echo networks."""
    if len(frame) == 0:
        return np.zeros(0)
    if not isinstance(backend, EpwLut):
        return predict_sample_epw(backend, frame, spec, config.gap)
    clusters = cluster_rays(frame, config.gap, spec.max_echoes)
    yaw = np.clip(azimuth_centers(spec)[frame.azimuth_index], backend.bins.yaw_edges[0], backend.bins.yaw_edges[-1])
    kept = clusters.sample_echo >= 0
    mode = QueryMode.SAMPLE if config.mode == SelectionMode.SAMPLE else QueryMode.MEAN
    rng = np.random.default_rng([config.seed, frame.frame_id]) if mode == QueryMode.SAMPLE else None
    epw = predict_epw(
        backend, frame.cls, np.maximum(clusters.sample_echo, 0), frame.distance, yaw,
        layer=frame.layer if backend.bins.use_layer else None, mode=mode, rng=rng,
    )
    return np.where(kept, epw, 0.0)


def apply_model(
    frame: DenseFrame,
    backend: Backend,
    hist: EchoOccurrenceHist,
    config: SelectionConfig,
    spec: SensorSpec,
    lut: Optional[EpwLut] = None,
) -> ScanFrame:
    """
    Full two-stage pipeline: EPW prediction then per-ray selection.

    With a lookup-table backend the same table supplies the selection
    likelihood unless lut is given.
    """
    if len(frame) == 0:
        return ScanFrame.empty(frame.frame_id)
    pred = predict_dense_epw(frame, backend, spec, config)
    if lut is None and isinstance(backend, EpwLut):
        lut = backend
    return select_echoes(frame, pred, hist, config, spec, lut)


def write_hist(path: Union[str, Path], hist: EchoOccurrenceHist) -> None:
    """Write an EHST file: edges, then P(k) with row totals, then offset tables."""
    header = _EHST_HEADER.pack(
        EHST_MAGIC, EHST_VERSION, len(hist.yaw_edges), len(hist.distance_edges), len(hist.offset_edges),
    )
    blocks = [
        hist.yaw_edges, hist.distance_edges, hist.offset_edges,
        hist.probabilities, hist.counts.sum(axis=-1),
        hist.offset_probabilities, hist.offset_counts.sum(axis=-1),
    ]
    Path(path).write_bytes(header + b"".join(np.ascontiguousarray(b, dtype="<f8").tobytes() for b in blocks))


def read_hist(path: Union[str, Path]) -> EchoOccurrenceHist:
    """
    Read an EHST file.

    Raises:
        FormatError: On a bad magic, unsupported version or size mismatch
    """
    raw = Path(path).read_bytes()
    if len(raw) < _EHST_HEADER.size:
        raise FormatError(f"{path}: truncated histogram header")
    magic, version, n_yaw, n_dist, n_offset = _EHST_HEADER.unpack_from(raw)
    if magic != EHST_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {EHST_MAGIC!r}")
    if version != EHST_VERSION:
        raise FormatError(f"{path}: unsupported histogram version {version}")
    sizes = [
        n_yaw, n_dist, n_offset,
        (n_yaw - 1) * NUM_CLASSES * ECHO_COUNTS, (n_yaw - 1) * NUM_CLASSES,
        (n_dist - 1) * (n_offset - 1), n_dist - 1,
    ]
    if min(n_yaw, n_dist, n_offset) < 2 or len(raw) != _EHST_HEADER.size + 8 * sum(sizes):
        raise FormatError(f"{path}: histogram payload does not match the declared edges")
    values = np.frombuffer(raw, dtype="<f8", offset=_EHST_HEADER.size)
    blocks = np.split(values, np.cumsum(sizes)[:-1])
    yaw_edges, distance_edges, offset_edges, probs, totals, offset_probs, offset_totals = blocks
    counts = probs.reshape(n_yaw - 1, NUM_CLASSES, ECHO_COUNTS) * totals.reshape(n_yaw - 1, NUM_CLASSES, 1)
    offset_counts = offset_probs.reshape(n_dist - 1, n_offset - 1) * offset_totals[:, None]
    try:
        return EchoOccurrenceHist(yaw_edges.copy(), distance_edges.copy(), offset_edges.copy(), counts, offset_counts)
    except ConfigurationError as e:
        raise FormatError(f"{path}: {e}") from e


MODEL_FILES = {"lut": "epw.lut", "hist": "echo.ehst"}


def checkpoint_name(variant: Union[Variant, str], echo: int) -> str:
    return f"{Variant(variant).value}_echo{echo}.epwm"


@dataclass(eq=False)
class SensorModel:
    """Everything inference needs: spec, histograms, lookup table, optional networks."""

    spec: SensorSpec
    hist: EchoOccurrenceHist
    lut: EpwLut
    nets: Optional[List[EpwNetwork]] = None
    config: SelectionConfig = field(default_factory=SelectionConfig)

    @property
    def backend(self) -> str:
        return "net" if self.nets else "lut"

    @classmethod
    def load(
        cls,
        models_dir: Union[str, Path],
        spec: SensorSpec,
        backend: str = "net",
        variant: Union[Variant, str] = Variant.UNET,
        config: Optional[SelectionConfig] = None,
    ) -> "SensorModel":
        """
        Load the fitted artifacts of a models directory.

        Raises:
            CheckpointError: When a required model file is missing
        """
        models_dir = Path(models_dir)
        for name in MODEL_FILES.values():
            if not (models_dir / name).exists():
                raise CheckpointError(f"Missing model file {models_dir / name} (run fit-lut first)")
        nets = None
        if backend == "net":
            nets = [load_checkpoint(models_dir / checkpoint_name(variant, e)) for e in range(spec.max_echoes)]
        elif backend != "lut":
            raise ConfigurationError(f"Unknown backend '{backend}'")
        logger.info(f"Loaded sensor model from {models_dir} ({backend} backend)")
        return cls(
            spec, read_hist(models_dir / MODEL_FILES["hist"]), read_lut(models_dir / MODEL_FILES["lut"]),
            nets, config or SelectionConfig(),
        )

    def apply(self, frame: DenseFrame) -> ScanFrame:
        backend: Backend = self.nets if self.nets else self.lut
        return apply_model(frame, backend, self.hist, self.config, self.spec, self.lut)

