"""
LIDAR-EPW Scene Simulation
==========================

Synthetic scenes and the ideal simulator that replaces a game engine:
- Random road scenes (boxes for road users on a ground plane)
- Beam-footprint raycasting: K sub-rays per laser ray, exact ray/box
  and ray/plane intersections, dense annotated ray profiles
- Parametric reference EPW that stands in for real sensor traces
- Paired (dense frame, ground-truth scan) datasets

Author: LIDAR-EPW Team
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from ..config import read_mapping, require_keys, write_mapping
from ..errors import ConfigurationError, DataError, DomainError, FormatError
from .frames import (
    CLUSTER_GAP_M, DenseFrame, ScanFrame, read_dense_jsonl, read_scan_csv,
    truth_scan, write_dense_jsonl, write_scan_csv,
)
from .sensor import ClassLabel, SensorSpec, check_class_codes, ray_directions

logger = logging.getLogger(__name__)

# Reference EPW model: E_base(class) * reflectivity * cos(incidence) * exp(-alpha * d) + noise
EPW_BASE_NS = np.array([8.0, 12.0, 16.0, 6.0, 7.0, 25.0])
EPW_ATTENUATION_PER_M = 0.005
EPW_NOISE_SIGMA_NS = 0.5
EPW_CEILING_NS = 50.0

FRAME_RATE_HZ = 25.0

# Nominal half extents (m) of generated objects, by class code
_HALF_EXTENTS = {
    ClassLabel.CAR: (2.25, 0.9, 0.75),
    ClassLabel.TRUCK: (4.5, 1.25, 1.6),
    ClassLabel.PEDESTRIAN: (0.3, 0.3, 0.9),
    ClassLabel.MOTORBIKE: (1.0, 0.4, 0.7),
    ClassLabel.HIGH_REFLECTIVE: (0.05, 0.4, 0.4),
}
_SIGN_HEIGHT_M = 2.0


def derive_seed(seed: int, *keys: int) -> int:
    """Derive an independent 64-bit seed from a base seed and integer keys."""
    sequence = np.random.SeedSequence([int(seed)] + [int(k) for k in keys])
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class SceneObject:
    """Yaw-rotated box, annotated with a class and a reflectivity."""

    cls: ClassLabel
    center: Tuple[float, float, float]
    yaw: float
    half_extents: Tuple[float, float, float]
    reflectivity: float

    def __post_init__(self):
        object.__setattr__(self, "cls", ClassLabel.from_code(self.cls))
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "half_extents", tuple(float(v) for v in self.half_extents))
        if len(self.center) != 3 or len(self.half_extents) != 3:
            raise ConfigurationError("center and half_extents must be 3-vectors")
        if min(self.half_extents) <= 0:
            raise ConfigurationError(f"half_extents must be strictly positive, got {self.half_extents}")
        if not 0.0 <= self.reflectivity <= 1.0:
            raise ConfigurationError(f"reflectivity must be in [0, 1], got {self.reflectivity}")

    def to_local(self, points: np.ndarray) -> np.ndarray:
        """Express world points (..., 3) in the box frame."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rel = np.asarray(points, dtype=float) - np.asarray(self.center)
        return np.stack([c * rel[..., 0] + s * rel[..., 1], -s * rel[..., 0] + c * rel[..., 1], rel[..., 2]], axis=-1)


@dataclass(frozen=True)
class Plane:
    """Infinite plane {x : normal . x = offset}."""

    normal: Tuple[float, float, float]
    offset: float
    cls: ClassLabel = ClassLabel.NONE
    reflectivity: float = 0.5

    def __post_init__(self):
        normal = np.asarray(self.normal, dtype=float)
        norm = float(np.linalg.norm(normal))
        if norm == 0:
            raise ConfigurationError("Plane normal must be non-zero")
        object.__setattr__(self, "normal", tuple(float(v) for v in normal / norm))
        object.__setattr__(self, "cls", ClassLabel.from_code(self.cls))
        if not 0.0 <= self.reflectivity <= 1.0:
            raise ConfigurationError(f"reflectivity must be in [0, 1], got {self.reflectivity}")


@dataclass(frozen=True)
class Scene:
    """
    A static scene around the sensor.

    The sensor sits at (0, 0, sensor_height); ground_z None removes the
    ground plane. Extra planes (walls) are optional.
    """

    objects: Tuple[SceneObject, ...] = ()
    ground_z: Optional[float] = 0.0
    rng_seed: int = 0
    planes: Tuple[Plane, ...] = ()
    sensor_height: float = 1.8
    ground_reflectivity: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "planes", tuple(self.planes))

    @property
    def origin(self) -> np.ndarray:
        return np.array([0.0, 0.0, self.sensor_height])


@dataclass(frozen=True)
class SceneConfig:
    """Scene-generation parameters: object-count ranges per class and placement bounds."""

    object_counts: Dict[str, Tuple[int, int]] = field(default_factory=lambda: {
        "car": (2, 6), "truck": (0, 2), "pedestrian": (0, 4),
        "motorbike": (0, 2), "high_reflective": (0, 3),
    })
    x_range: Tuple[float, float] = (4.0, 80.0)
    y_range: Tuple[float, float] = (-40.0, 40.0)
    reflectivity_range: Tuple[float, float] = (0.4, 1.0)
    ground_z: float = 0.0
    sensor_height: float = 1.8
    ground_reflectivity: float = 0.3

    def __post_init__(self):
        counts = {}
        for name, bounds in dict(self.object_counts).items():
            try:
                label = ClassLabel[name.upper()]
            except KeyError as e:
                raise ConfigurationError(f"Unknown object class '{name}'") from e
            if label == ClassLabel.NONE:
                raise ConfigurationError("Class 'none' is reserved for the ground")
            low, high = (int(v) for v in bounds)
            if low < 0 or high < 0:
                raise ConfigurationError(f"Negative object count for '{name}'")
            if low > high:
                raise ConfigurationError(f"Inverted object count range for '{name}': {bounds}")
            counts[name.lower()] = (low, high)
        object.__setattr__(self, "object_counts", counts)
        for name in ("x_range", "y_range", "reflectivity_range"):
            low, high = (float(v) for v in getattr(self, name))
            if low > high:
                raise ConfigurationError(f"Inverted bounds for {name}: ({low}, {high})")
            object.__setattr__(self, name, (low, high))
        low, high = self.reflectivity_range
        if low < 0 or high > 1:
            raise ConfigurationError("reflectivity_range must lie in [0, 1]")
        if not 0 <= self.ground_reflectivity <= 1:
            raise ConfigurationError("ground_reflectivity must lie in [0, 1]")
        if self.sensor_height <= 0:
            raise ConfigurationError("sensor_height must be positive")

    @classmethod
    def empty(cls) -> "SceneConfig":
        """Configuration that produces empty-road scenes."""
        return cls(object_counts={})

    @classmethod
    def from_dict(cls, content: Dict[str, Any]) -> "SceneConfig":
        require_keys(content, set(cls.__dataclass_fields__), "scene config")
        return cls(**content)

    @classmethod
    def from_yaml(cls, path: Union[str, Path]) -> "SceneConfig":
        return cls.from_dict(read_mapping(path))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "object_counts": {k: list(v) for k, v in self.object_counts.items()},
            "x_range": list(self.x_range),
            "y_range": list(self.y_range),
            "reflectivity_range": list(self.reflectivity_range),
            "ground_z": self.ground_z,
            "sensor_height": self.sensor_height,
            "ground_reflectivity": self.ground_reflectivity,
        }


@dataclass(frozen=True)
class BeamFootprint:
    """
    Beam divergence model: one central sub-ray plus n_sub_rays - 1 sub-rays
    evenly spread on a cone of the given half angle. A zero half angle
    collapses the beam to the central sub-ray.
    """

    half_angle_deg: float = 0.2
    n_sub_rays: int = 5

    def __post_init__(self):
        if self.half_angle_deg < 0:
            raise ConfigurationError("Beam half angle must be non-negative")
        if self.n_sub_rays < 1 or self.n_sub_rays > 255:
            raise ConfigurationError("n_sub_rays must be within 1..255")

    @property
    def effective_sub_rays(self) -> int:
        return 1 if self.half_angle_deg == 0 else self.n_sub_rays


def build_scene(config: SceneConfig, seed: int) -> Scene:
    """
    Generate a random scene, deterministic for a fixed (config, seed).

    Objects are drawn class by class in code order; placements that would
    enclose the sensor origin are redrawn.
    """
    rng = np.random.default_rng(int(seed))
    origin = np.array([0.0, 0.0, config.ground_z + config.sensor_height])
    objects: List[SceneObject] = []
    for label in ClassLabel:
        if label == ClassLabel.NONE:
            continue
        low, high = config.object_counts.get(label.name.lower(), (0, 0))
        count = int(rng.integers(low, high + 1)) if high > 0 else 0
        for _ in range(count):
            objects.append(_place_object(label, config, rng, origin))
    logger.debug(f"Built scene (seed={seed}) with {len(objects)} objects")
    return Scene(
        objects=tuple(objects),
        ground_z=config.ground_z,
        rng_seed=int(seed),
        sensor_height=config.ground_z + config.sensor_height,
        ground_reflectivity=config.ground_reflectivity,
    )


def _place_object(label: ClassLabel, config: SceneConfig, rng: np.random.Generator, origin: np.ndarray) -> SceneObject:
    base = np.asarray(_HALF_EXTENTS[label])
    for _ in range(100):
        half = base * rng.uniform(0.9, 1.1, size=3)
        x = rng.uniform(*config.x_range)
        y = rng.uniform(*config.y_range)
        yaw = rng.uniform(-math.pi, math.pi)
        if label == ClassLabel.HIGH_REFLECTIVE:
            z = config.ground_z + _SIGN_HEIGHT_M
            reflectivity = rng.uniform(0.9, 1.0)
        else:
            z = config.ground_z + half[2]
            reflectivity = rng.uniform(*config.reflectivity_range)
        candidate = SceneObject(label, (x, y, z), yaw, tuple(half), reflectivity)
        if np.any(np.abs(candidate.to_local(origin)) > np.asarray(candidate.half_extents) + 0.5):
            return candidate
    raise ConfigurationError("Placement bounds leave no room for objects away from the sensor")


def reference_epw(
    cls: Any,
    distance: Any,
    incidence_cos: Any,
    reflectivity: Any,
    noise: Optional[np.random.Generator] = None,
    sigma: float = EPW_NOISE_SIGMA_NS,
) -> Union[float, np.ndarray]:
    """
    Parametric reference EPW in nanoseconds.

    epw = E_base(class) * reflectivity * incidence_cos * exp(-alpha * distance) + eps,
    clipped to [0, 50]; eps ~ N(0, sigma) only when a noise generator is given.
    Accepts scalars or broadcastable arrays.

    Raises:
        DomainError: If distance <= 0, or incidence_cos / reflectivity leave [0, 1]
    """
    codes = np.asarray(cls, dtype=np.int64)
    distance = np.asarray(distance, dtype=np.float64)
    incidence_cos = np.asarray(incidence_cos, dtype=np.float64)
    reflectivity = np.asarray(reflectivity, dtype=np.float64)
    if np.any(~(distance > 0)):
        raise DomainError("distance must be > 0")
    if np.any(~((incidence_cos >= 0) & (incidence_cos <= 1))):
        raise DomainError("incidence_cos must lie in [0, 1]")
    if np.any(~((reflectivity >= 0) & (reflectivity <= 1))):
        raise DomainError("reflectivity must lie in [0, 1]")
    check_class_codes(codes)
    epw = EPW_BASE_NS[codes] * reflectivity * incidence_cos * np.exp(-EPW_ATTENUATION_PER_M * distance)
    if noise is not None and sigma > 0:
        epw = epw + noise.normal(0.0, sigma, size=np.shape(epw))
    epw = np.clip(epw, 0.0, EPW_CEILING_NS)
    return float(epw) if np.ndim(epw) == 0 else epw


def sub_ray_directions(spec: SensorSpec, footprint: BeamFootprint) -> np.ndarray:
    """Unit directions of all sub-rays, shape (rows, cols, K, 3); index 0 is the central ray."""
    centers = ray_directions(spec)
    k = footprint.effective_sub_rays
    if k == 1:
        return centers[:, :, None, :]
    az = np.arctan2(centers[..., 1], centers[..., 0])
    alt = np.arcsin(np.clip(centers[..., 2], -1.0, 1.0))
    u = np.stack([-np.sin(az), np.cos(az), np.zeros_like(az)], axis=-1)
    v = np.stack([-np.sin(alt) * np.cos(az), -np.sin(alt) * np.sin(az), np.cos(alt)], axis=-1)
    theta = math.radians(footprint.half_angle_deg)
    phi = 2.0 * np.pi * np.arange(k - 1) / (k - 1)
    rim = (
        math.cos(theta) * centers[:, :, None, :]
        + math.sin(theta) * (np.cos(phi)[:, None] * u[:, :, None, :] + np.sin(phi)[:, None] * v[:, :, None, :])
    )
    directions = np.concatenate([centers[:, :, None, :], rim], axis=2)
    return directions / np.linalg.norm(directions, axis=-1, keepdims=True)


def _intersect_box(obj: SceneObject, origin: np.ndarray, directions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Entry distance (inf on miss) and incidence cosine of rays against one box."""
    p = obj.to_local(origin)
    c, s = math.cos(obj.yaw), math.sin(obj.yaw)
    q = np.stack([c * directions[:, 0] + s * directions[:, 1], -s * directions[:, 0] + c * directions[:, 1], directions[:, 2]], axis=-1)
    h = np.asarray(obj.half_extents)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / q
        t1 = (-h - p) * inv
        t2 = (h - p) * inv
    parallel = q == 0
    inside = np.abs(p) <= h
    t_low = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    t_high = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    t_enter = t_low.max(axis=1)
    t_exit = t_high.min(axis=1)
    face = t_low.argmax(axis=1)
    hit = (t_enter <= t_exit) & (t_enter > 0)
    t = np.where(hit, t_enter, np.inf)
    incidence = np.abs(q[np.arange(len(q)), face])
    return t, incidence


def _intersect_plane(normal: np.ndarray, offset: float, origin: np.ndarray, directions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    denominator = directions @ normal
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (offset - origin @ normal) / denominator
    t = np.where((denominator != 0) & (t > 0), t, np.inf)
    return t, np.abs(denominator)


def cast_rays(
    scene: Scene,
    spec: SensorSpec,
    footprint: Optional[BeamFootprint] = None,
    seed: int = 0,
    epw_noise_sigma: float = EPW_NOISE_SIGMA_NS,
    frame_id: int = 0,
) -> DenseFrame:
    """
    Cast every sub-ray of every (layer, azimuth) cell into the scene.

    Each sub-ray keeps its nearest hit within max_range, producing one dense
    sample annotated with the hit surface's class (ground and planes default
    to None), incidence cosine and reference EPW (noisy when
    epw_noise_sigma > 0, seeded by seed).

    Returns:
        DenseFrame: Dense annotated ray profile
    """
    footprint = footprint or BeamFootprint()
    directions = sub_ray_directions(spec, footprint)
    rows, cols, k, _ = directions.shape
    flat = directions.reshape(-1, 3)
    origin = scene.origin

    best_t = np.full(len(flat), np.inf)
    best_inc = np.zeros(len(flat))
    best_cls = np.zeros(len(flat), dtype=np.int64)
    best_refl = np.zeros(len(flat))

    def _merge(t: np.ndarray, incidence: np.ndarray, cls: int, reflectivity: float) -> None:
        closer = t < best_t
        best_t[closer] = t[closer]
        best_inc[closer] = incidence[closer]
        best_cls[closer] = cls
        best_refl[closer] = reflectivity

    if scene.ground_z is not None:
        t, inc = _intersect_plane(np.array([0.0, 0.0, 1.0]), scene.ground_z, origin, flat)
        _merge(t, inc, int(ClassLabel.NONE), scene.ground_reflectivity)
    for plane in scene.planes:
        t, inc = _intersect_plane(np.asarray(plane.normal), plane.offset, origin, flat)
        _merge(t, inc, int(plane.cls), plane.reflectivity)
    for obj in scene.objects:
        t, inc = _intersect_box(obj, origin, flat)
        _merge(t, inc, int(obj.cls), obj.reflectivity)

    hit = np.flatnonzero(best_t <= spec.max_range)
    layer, az, sub = np.unravel_index(hit, (rows, cols, k))
    distance = best_t[hit]
    incidence = np.clip(best_inc[hit], 0.0, 1.0)
    noise = np.random.default_rng(int(seed)) if epw_noise_sigma > 0 else None
    epw = (
        reference_epw(best_cls[hit], distance, incidence, best_refl[hit], noise=noise, sigma=epw_noise_sigma)
        if len(hit) else np.zeros(0)
    )
    return DenseFrame(frame_id, layer, az, sub, distance, best_cls[hit], incidence, epw)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetConfig:
    """Everything that shapes a synthetic dataset besides its size and seed."""

    scene: SceneConfig = field(default_factory=SceneConfig)
    footprint: BeamFootprint = field(default_factory=BeamFootprint)
    epw_noise_sigma: float = EPW_NOISE_SIGMA_NS
    cluster_gap: float = CLUSTER_GAP_M
    echo_dropout: float = 0.0
    range_jitter: float = 0.0

    def __post_init__(self):
        if self.epw_noise_sigma < 0:
            raise ConfigurationError("epw_noise_sigma must be non-negative")
        if self.cluster_gap <= 0:
            raise ConfigurationError("cluster_gap must be positive")
        for name in ("echo_dropout", "range_jitter"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigurationError(f"{name} must lie in [0, 1]")

    @classmethod
    def from_dict(cls, content: Dict[str, Any]) -> "DatasetConfig":
        require_keys(content, set(cls.__dataclass_fields__), "dataset config")
        content = dict(content)
        if "scene" in content:
            content["scene"] = SceneConfig.from_dict(content["scene"])
        if "footprint" in content:
            content["footprint"] = BeamFootprint(**content["footprint"])
        return cls(**content)

    @classmethod
    def from_yaml(cls, path: Union[str, Path]) -> "DatasetConfig":
        return cls.from_dict(read_mapping(path))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "scene": self.scene.to_dict(),
            "footprint": {"half_angle_deg": self.footprint.half_angle_deg, "n_sub_rays": self.footprint.n_sub_rays},
            "epw_noise_sigma": self.epw_noise_sigma,
            "cluster_gap": self.cluster_gap,
            "echo_dropout": self.echo_dropout,
            "range_jitter": self.range_jitter,
        }


class FramePair(NamedTuple):
    """A dense frame with its ground-truth scan."""

    dense: DenseFrame
    truth: ScanFrame


def make_frame(config: DatasetConfig, spec: SensorSpec, seed: int, frame_id: int) -> FramePair:
    """Simulate one frame: its own scene, rays and truth, all seeded from (seed, frame_id)."""
    scene = build_scene(config.scene, derive_seed(seed, frame_id, 0))
    dense = cast_rays(
        scene, spec, config.footprint, seed=derive_seed(seed, frame_id, 1),
        epw_noise_sigma=config.epw_noise_sigma, frame_id=frame_id,
    )
    truth = truth_scan(
        dense, config.cluster_gap, spec=spec,
        rng=np.random.default_rng(derive_seed(seed, frame_id, 2)),
        echo_dropout=config.echo_dropout, range_jitter=config.range_jitter,
    )
    return FramePair(dense, truth)


def make_dataset(
    config: DatasetConfig,
    spec: SensorSpec,
    n_train: int,
    n_val: int,
    seed: int,
) -> Tuple[List[FramePair], List[FramePair]]:
    """
    Generate train and validation frames with their ground-truth scans.

    Training frames get ids 0..n_train-1, validation frames follow; every
    frame is seeded from (seed, frame_id) so seeds are disjoint.
    """
    if n_train < 1 or n_val < 1:
        raise ConfigurationError("n_train and n_val must both be >= 1")
    frames = [make_frame(config, spec, seed, frame_id) for frame_id in range(n_train + n_val)]
    logger.info(f"Generated {n_train} training and {n_val} validation frames (seed={seed})")
    return frames[:n_train], frames[n_train:]


def save_split(directory: Union[str, Path], pairs: Sequence[FramePair]) -> None:
    """Write one split as dense.jsonl + scan.csv."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_dense_jsonl(directory / "dense.jsonl", (p.dense for p in pairs))
    write_scan_csv(directory / "scan.csv", (p.truth for p in pairs))


def load_split(directory: Union[str, Path]) -> List[FramePair]:
    """Read a split back, pairing truth frames with dense frames by frame id."""
    directory = Path(directory)
    dense = read_dense_jsonl(directory / "dense.jsonl")
    truth = {f.frame_id: f for f in read_scan_csv(directory / "scan.csv")}
    unknown = set(truth) - {f.frame_id for f in dense}
    if unknown:
        raise DataError(f"{directory}: scan frames {sorted(unknown)[:5]} have no dense counterpart")
    return [FramePair(f, truth.get(f.frame_id, ScanFrame.empty(f.frame_id))) for f in dense]


def save_dataset(
    directory: Union[str, Path],
    train: Sequence[FramePair],
    val: Sequence[FramePair],
    spec: SensorSpec,
    config: DatasetConfig,
    seed: int,
) -> None:
    """Write both splits and the dataset.yaml manifest."""
    directory = Path(directory)
    save_split(directory / "train", train)
    save_split(directory / "val", val)
    write_mapping(directory / "dataset.yaml", {
        "seed": int(seed),
        "n_train": len(train),
        "n_val": len(val),
        "frame_rate_hz": FRAME_RATE_HZ,
        "spec": spec.to_dict(),
        "config": config.to_dict(),
    })


def load_manifest(directory: Union[str, Path]) -> Dict[str, Any]:
    """Read dataset.yaml; its spec entry is returned as a SensorSpec."""
    path = Path(directory) / "dataset.yaml"
    if not path.exists():
        raise FormatError(f"{directory} is not a dataset directory (missing dataset.yaml)")
    manifest = read_mapping(path)
    manifest["spec"] = SensorSpec.from_dict(manifest.get("spec", {}))
    return manifest
