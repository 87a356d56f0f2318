"""
LIDAR-EPW Convolutional Networks
================================

The EPW regression networks: six fully-convolutional encoder-decoder
variants over 2-channel (Distance, Class) Polar Grid Maps, producing a
1-channel EPW map of the same size.

- Unet: 3 down blocks (2 convs + max-pool), bottleneck, 3 up blocks
  (transpose conv + skip concat + 2 convs), 1x1 head
- Tiny variants: 1 conv per block
- CAE variants: 3 stride-2 convs, 1-conv bottleneck, 3 transpose convs,
  no skip connections
- LF variants: half the kernel count of every layer

Gradients are derived by hand (reverse mode through layers.py).

Author: LIDAR-EPW Team
"""

import logging
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np

from ..errors import CheckpointError, ConfigurationError, DimensionError
from .layers import Conv2d, ConvTranspose2d, max_pool, max_pool_backward
from .pgm import Channel, PolarGridMap, stack_inputs
from .sensor import NUM_CLASSES, SensorSpec

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"EPWM"
CHECKPOINT_VERSION = 1
DEFAULT_BASE_CHANNELS = 16
INPUT_CHANNELS = 2
DEPTH = 3

Layer = Union[Conv2d, ConvTranspose2d]


class Variant(Enum):
    """Network variants, keyed by their command-line names."""

    UNET = "unet"
    UNET_LF = "unet-lf"
    TINY_UNET = "tiny"
    TINY_UNET_LF = "tiny-lf"
    CAE = "cae"
    CAE_LF = "cae-lf"

    @property
    def code(self) -> int:
        return list(Variant).index(self)

    @classmethod
    def from_code(cls, code: int) -> "Variant":
        members = list(cls)
        if not 0 <= code < len(members):
            raise CheckpointError(f"Unknown variant id {code}")
        return members[code]

    @property
    def light(self) -> bool:
        return self.value.endswith("-lf")

    @property
    def skips(self) -> bool:
        return self not in (Variant.CAE, Variant.CAE_LF)

    @property
    def convs_per_block(self) -> int:
        return 2 if self in (Variant.UNET, Variant.UNET_LF) else 1


@dataclass
class TrainingHistory:
    """Per-epoch training loss and validation L1, append-only."""

    train_loss: List[float] = field(default_factory=list)
    val_l1: List[float] = field(default_factory=list)

    def append(self, train_loss: float, val_l1: float) -> None:
        self.train_loss.append(float(train_loss))
        self.val_l1.append(float(val_l1))

    @property
    def epochs(self) -> int:
        return len(self.train_loss)


@dataclass(eq=False)
class EpwNetwork:
    """Parameters and topology of one network variant."""

    variant: Variant
    base_channels: int
    encoder: List[List[Conv2d]]
    bottleneck: List[Conv2d]
    ups: List[ConvTranspose2d]
    decoder: List[List[Conv2d]]
    head: Conv2d
    history: TrainingHistory = field(default_factory=TrainingHistory)

    @property
    def layers(self) -> List[Layer]:
        """Parameterized layers in canonical (checkpoint) order."""
        ordered: List[Layer] = [conv for block in self.encoder for conv in block]
        ordered += self.bottleneck
        for up, block in zip(self.ups, self.decoder):
            ordered.append(up)
            ordered += block
        ordered.append(self.head)
        return ordered

    @property
    def parameter_count(self) -> int:
        return sum(layer.weight.size + layer.bias.size for layer in self.layers)

    def weights(self) -> List[np.ndarray]:
        return [layer.weight for layer in self.layers]

    def check_input(self, x: np.ndarray) -> None:
        if x.ndim != 4 or x.shape[1] != INPUT_CHANNELS:
            raise DimensionError(f"Network input must be (batch, 2, rows, cols), got {x.shape}")
        factor = 2 ** DEPTH
        if x.shape[2] % factor or x.shape[3] % factor or x.shape[2] == 0 or x.shape[3] == 0:
            raise DimensionError(f"Input rows and cols must be positive multiples of {factor}, got {x.shape[2]}x{x.shape[3]}")

    def forward(self, x: np.ndarray, ablate_bottleneck: bool = False) -> np.ndarray:
        """EPW maps (batch, 1, rows, cols) for normalized inputs (batch, 2, rows, cols)."""
        return self.forward_cached(x, ablate_bottleneck)[0]

    def forward_cached(self, x: np.ndarray, ablate_bottleneck: bool = False) -> Tuple[np.ndarray, Dict[str, Any]]:
        self.check_input(x)
        tape: Dict[str, Any] = {"encoder": [], "pools": [], "skip_channels": []}
        h = x
        skips = []
        for block in self.encoder:
            caches = []
            for conv in block:
                h, cache = conv.forward(h)
                caches.append(cache)
            tape["encoder"].append(caches)
            if self.variant.skips:
                skips.append(h)
                h, mask = max_pool(h)
                tape["pools"].append(mask)
        tape["ablated"] = ablate_bottleneck
        if ablate_bottleneck:
            h = np.zeros_like(h)
        tape["bottleneck"] = []
        for conv in self.bottleneck:
            h, cache = conv.forward(h)
            tape["bottleneck"].append(cache)
        tape["ups"], tape["decoder"] = [], []
        for up, block in zip(self.ups, self.decoder):
            h, cache = up.forward(h)
            tape["ups"].append(cache)
            if self.variant.skips:
                skip = skips.pop()
                tape["skip_channels"].append(h.shape[1])
                h = np.concatenate([h, skip], axis=1)
            caches = []
            for conv in block:
                h, cache = conv.forward(h)
                caches.append(cache)
            tape["decoder"].append(caches)
        y, tape["head"] = self.head.forward(h)
        return y, tape

    def backward(self, grad: np.ndarray, tape: Dict[str, Any]) -> List[Tuple[np.ndarray, np.ndarray]]:
        """(d weight, d bias) per layer, in the order of self.layers."""
        grads: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}

        def _step(layer: Layer, g: np.ndarray, cache: Any) -> np.ndarray:
            d_x, d_w, d_b = layer.backward(g, cache)
            grads[id(layer)] = (d_w, d_b)
            return d_x

        g = _step(self.head, grad, tape["head"])
        skip_grads = []
        for index in reversed(range(len(self.ups))):
            for conv, cache in zip(reversed(self.decoder[index]), reversed(tape["decoder"][index])):
                g = _step(conv, g, cache)
            if self.variant.skips:
                split = tape["skip_channels"][index]
                skip_grads.append(g[:, split:])
                g = g[:, :split]
            g = _step(self.ups[index], g, tape["ups"][index])
        for conv, cache in zip(reversed(self.bottleneck), reversed(tape["bottleneck"])):
            g = _step(conv, g, cache)
        if tape.get("ablated"):
            g = np.zeros_like(g)
        for index in reversed(range(len(self.encoder))):
            if self.variant.skips:
                g = max_pool_backward(g, tape["pools"][index]) + skip_grads[index]
            for conv, cache in zip(reversed(self.encoder[index]), reversed(tape["encoder"][index])):
                g = _step(conv, g, cache)
        return [grads[id(layer)] for layer in self.layers]

    def flops(self, rows: int, cols: int) -> int:
        """Multiply-accumulate count of one forward pass on a rows x cols input."""
        total = 0
        r, c = rows, cols
        for block in self.encoder:
            for conv in block:
                total += conv.flops(r, c)
                r, c = conv.output_size(r, c)
            if self.variant.skips:
                r, c = r // 2, c // 2
        for conv in self.bottleneck:
            total += conv.flops(r, c)
        for up, block in zip(self.ups, self.decoder):
            total += up.flops(r, c)
            r, c = 2 * r, 2 * c
            for conv in block:
                total += conv.flops(r, c)
        return total + self.head.flops(r, c)

    def copy(self) -> "EpwNetwork":
        clone = build_network(self.variant, self.base_channels, seed=0)
        clone.set_parameters([(layer.weight.copy(), layer.bias.copy()) for layer in self.layers])
        clone.history = TrainingHistory(list(self.history.train_loss), list(self.history.val_l1))
        return clone

    def set_parameters(self, parameters: Sequence[Tuple[np.ndarray, np.ndarray]]) -> None:
        layers = self.layers
        if len(parameters) != len(layers):
            raise CheckpointError(f"Expected parameters for {len(layers)} layers, got {len(parameters)}")
        for layer, (weight, bias) in zip(layers, parameters):
            if weight.shape != layer.weight.shape or bias.shape != layer.bias.shape:
                raise CheckpointError(
                    f"Parameter shape {weight.shape} does not match layer shape {layer.weight.shape}"
                )
            layer.weight = np.asarray(weight, dtype=np.float64)
            layer.bias = np.asarray(bias, dtype=np.float64)


def build_network(variant: Union[Variant, str], base_channels: int = DEFAULT_BASE_CHANNELS, seed: int = 0) -> EpwNetwork:
    """
    Build a freshly initialized network.

    Weights follow He initialization scaled by fan-in, biases start at zero;
    parameters are a pure function of (variant, base_channels, seed).

    Args:
        variant: Network variant
        base_channels: Kernel count of the first block of the full variant;
            LF variants use half of it
        seed: Initialization seed

    Returns:
        EpwNetwork: The network
    """
    variant = Variant(variant)
    if base_channels < 1:
        raise ConfigurationError(f"base_channels must be >= 1, got {base_channels}")
    width = max(1, base_channels // 2) if variant.light else base_channels
    widths = [width * 2 ** level for level in range(DEPTH)]
    rng = np.random.default_rng(int(seed))
    convs = variant.convs_per_block

    encoder: List[List[Conv2d]] = []
    channels = INPUT_CHANNELS
    for out in widths:
        if variant.skips:
            block = [Conv2d.create(rng, channels if i == 0 else out, out) for i in range(convs)]
        else:
            block = [Conv2d.create(rng, channels, out, stride=2)]
        encoder.append(block)
        channels = out

    bottom = width * 2 ** DEPTH
    bottleneck = [Conv2d.create(rng, channels if i == 0 else bottom, bottom) for i in range(convs)]
    channels = bottom

    ups: List[ConvTranspose2d] = []
    decoder: List[List[Conv2d]] = []
    for out in reversed(widths):
        ups.append(ConvTranspose2d.create(rng, channels, out, relu=not variant.skips))
        if variant.skips:
            decoder.append([Conv2d.create(rng, 2 * out if i == 0 else out, out) for i in range(convs)])
        else:
            decoder.append([])
        channels = out

    head = Conv2d.create(rng, channels, 1, kernel=1, relu=False)
    network = EpwNetwork(variant, base_channels, encoder, bottleneck, ups, decoder, head)
    logger.debug(f"Built {variant.value} network (base {base_channels}): {network.parameter_count} parameters")
    return network


def normalize_input(x: np.ndarray, spec: SensorSpec) -> np.ndarray:
    """Scale raw (Distance, Class) stacks: distance / max_range, class code / 5."""
    x = np.array(x, dtype=np.float64)
    x[:, 0] /= spec.max_range
    x[:, 1] /= NUM_CLASSES - 1
    return x


def forward(net: EpwNetwork, pgm: PolarGridMap, spec: SensorSpec) -> PolarGridMap:
    """EPW map (1 channel) of one raw (Distance, Class) map."""
    pgm.check_spec(spec)
    x = normalize_input(stack_inputs([pgm]), spec)
    return PolarGridMap(net.forward(x)[0], (Channel.EPW,))


def loss(pred: np.ndarray, target: np.ndarray, weights: Union[EpwNetwork, Iterable[np.ndarray]] = (), lam: float = 0.0) -> float:
    """
    Mean squared error over all cells plus (lam / 2) * sum of squared
    weights (biases excluded).
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"Prediction shape {pred.shape} does not match target shape {target.shape}")
    data_term = float(np.mean((pred - target) ** 2))
    if lam == 0:
        return data_term
    if isinstance(weights, EpwNetwork):
        weights = weights.weights()
    return data_term + 0.5 * lam * sum(float(np.sum(np.square(w))) for w in weights)


def backward(net: EpwNetwork, x: np.ndarray, target: np.ndarray, lam: float = 0.0) -> Tuple[float, List[Tuple[np.ndarray, np.ndarray]]]:
    """
    Loss and its exact gradient with respect to every parameter.

    Returns:
        Tuple[float, List]: Loss value and (d weight, d bias) per layer in
        the order of net.layers
    """
    pred, tape = net.forward_cached(x)
    if pred.shape != target.shape:
        raise DimensionError(f"Prediction shape {pred.shape} does not match target shape {target.shape}")
    value = loss(pred, target, net, lam)
    grads = net.backward(2.0 * (pred - target) / pred.size, tape)
    if lam:
        grads = [(d_w + lam * layer.weight, d_b) for (d_w, d_b), layer in zip(grads, net.layers)]
    return value, grads


def save_checkpoint(path: Union[str, Path], net: EpwNetwork) -> None:
    """Write an EPWM checkpoint, history block included."""
    chunks = [
        CHECKPOINT_MAGIC,
        struct.pack("<IBI", CHECKPOINT_VERSION, net.variant.code, net.base_channels),
    ]
    for layer in net.layers:
        chunks.append(struct.pack("<4I", *layer.weight.shape))
        chunks.append(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    history = net.history
    chunks.append(struct.pack("<I", history.epochs))
    chunks.append(np.asarray(history.train_loss, dtype="<f8").tobytes())
    chunks.append(np.asarray(history.val_l1, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: Union[str, Path]) -> EpwNetwork:
    """
    Read an EPWM checkpoint.

    Raises:
        CheckpointError: If the file is missing, malformed or does not match
            the declared architecture
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint {path} not found")
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    try:
        version, variant_code, base_channels = struct.unpack_from("<IBI", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        net = build_network(Variant.from_code(variant_code), base_channels, seed=0)
        offset = 4 + struct.calcsize("<IBI")
        parameters = []
        for layer in net.layers:
            shape = struct.unpack_from("<4I", raw, offset)
            offset += 16
            if shape != layer.weight.shape:
                raise CheckpointError(f"{path}: layer shape {shape} does not match {layer.weight.shape}")
            weight = np.frombuffer(raw, dtype="<f8", count=int(np.prod(shape)), offset=offset).reshape(shape)
            offset += weight.nbytes
            bias = np.frombuffer(raw, dtype="<f8", count=layer.bias.size, offset=offset)
            offset += bias.nbytes
            parameters.append((weight.astype(np.float64), bias.astype(np.float64)))
        (epochs,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        train_loss = np.frombuffer(raw, dtype="<f8", count=epochs, offset=offset)
        val_l1 = np.frombuffer(raw, dtype="<f8", count=epochs, offset=offset + 8 * epochs)
        offset += 16 * epochs
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"{path}: truncated or malformed checkpoint ({e})") from e
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes after the history block")
    net.set_parameters(parameters)
    net.history = TrainingHistory([float(v) for v in train_loss], [float(v) for v in val_l1])
    return net
