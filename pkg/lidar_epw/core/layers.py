"""
LIDAR-EPW Layers
================

Numpy building blocks of the EPW networks, all on (batch, channels, rows,
cols) float64 arrays:
- Conv2d: k x k convolution, zero "same" padding, stride 1 or 2, optional ReLU
- ConvTranspose2d: 2 x 2 kernel, stride 2 up-sampling, optional ReLU
- max_pool / max_pool_backward: 2 x 2 max pooling

Forward passes never mutate a layer; they return the output together with
the cache the matching backward pass needs, so one set of parameters can
serve concurrent inference.

Author: LIDAR-EPW Team
"""

from dataclasses import dataclass
from typing import Any, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError


def he_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    """Weights drawn from N(0, sqrt(2 / fan_in))."""
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _check_input(x: np.ndarray, channels: int, name: str) -> None:
    if x.ndim != 4 or x.shape[1] != channels:
        raise DimensionError(f"{name} expects (batch, {channels}, rows, cols) input, got {x.shape}")


@dataclass(eq=False)
class Conv2d:
    """k x k convolution; weight (out, in, k, k), bias (out,)."""

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    relu: bool = True

    @classmethod
    def create(cls, rng: np.random.Generator, in_channels: int, out_channels: int, kernel: int = 3,
               stride: int = 1, relu: bool = True) -> "Conv2d":
        shape = (out_channels, in_channels, kernel, kernel)
        return cls(he_normal(rng, shape, in_channels * kernel * kernel), np.zeros(out_channels), stride, relu)

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    @property
    def padding(self) -> int:
        return self.kernel // 2

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, Any]:
        _check_input(x, self.in_channels, "Conv2d")
        p = self.padding
        padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        windows = sliding_window_view(padded, (self.kernel, self.kernel), axis=(2, 3))
        z = np.tensordot(windows, self.weight, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        z = z + self.bias[None, :, None, None]
        if self.stride > 1:
            z = z[:, :, ::self.stride, ::self.stride]
        y = np.maximum(z, 0.0) if self.relu else z
        return y, (x.shape, windows, z)

    def backward(self, grad: np.ndarray, cache: Any) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Gradients (d input, d weight, d bias) for an upstream gradient of the output."""
        x_shape, windows, z = cache
        if self.relu:
            grad = grad * (z > 0)
        if self.stride > 1:
            full = np.zeros((x_shape[0], self.out_channels, windows.shape[2], windows.shape[3]))
            full[:, :, ::self.stride, ::self.stride] = grad
            grad = full
        d_bias = grad.sum(axis=(0, 2, 3))
        d_weight = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))
        k, p = self.kernel, self.padding
        padded_grad = np.pad(grad, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
        grad_windows = sliding_window_view(padded_grad, (k, k), axis=(2, 3))
        flipped = self.weight[:, :, ::-1, ::-1]
        d_padded = np.tensordot(grad_windows, flipped, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
        d_x = d_padded[:, :, p:p + x_shape[2], p:p + x_shape[3]]
        return d_x, d_weight, d_bias

    def output_size(self, rows: int, cols: int) -> Tuple[int, int]:
        return -(-rows // self.stride), -(-cols // self.stride)

    def flops(self, rows: int, cols: int) -> int:
        """Multiply-accumulate count for an input of the given size."""
        out_rows, out_cols = self.output_size(rows, cols)
        return out_rows * out_cols * self.weight.size


@dataclass(eq=False)
class ConvTranspose2d:
    """2 x 2, stride 2 transposed convolution; weight (in, out, 2, 2), bias (out,)."""

    weight: np.ndarray
    bias: np.ndarray
    relu: bool = False

    @classmethod
    def create(cls, rng: np.random.Generator, in_channels: int, out_channels: int, relu: bool = False) -> "ConvTranspose2d":
        shape = (in_channels, out_channels, 2, 2)
        return cls(he_normal(rng, shape, in_channels), np.zeros(out_channels), relu)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[1]

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, Any]:
        _check_input(x, self.in_channels, "ConvTranspose2d")
        n, _, rows, cols = x.shape
        z = np.einsum("ncij,couv->noiujv", x, self.weight).reshape(n, self.out_channels, 2 * rows, 2 * cols)
        z = z + self.bias[None, :, None, None]
        y = np.maximum(z, 0.0) if self.relu else z
        return y, (x, z)

    def backward(self, grad: np.ndarray, cache: Any) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        x, z = cache
        if self.relu:
            grad = grad * (z > 0)
        n, _, rows, cols = x.shape
        blocks = grad.reshape(n, self.out_channels, rows, 2, cols, 2)
        d_weight = np.einsum("ncij,noiujv->couv", x, blocks)
        d_x = np.einsum("noiujv,couv->ncij", blocks, self.weight)
        return d_x, d_weight, grad.sum(axis=(0, 2, 3))

    def flops(self, rows: int, cols: int) -> int:
        return rows * cols * self.weight.size


def max_pool(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """2 x 2 max pooling; the cache is a one-hot mask of the first maximum per window."""
    n, c, rows, cols = x.shape
    if rows % 2 or cols % 2:
        raise DimensionError(f"max_pool needs even rows and cols, got {rows}x{cols}")
    windows = x.reshape(n, c, rows // 2, 2, cols // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, rows // 2, cols // 2, 4)
    winner = windows.argmax(axis=-1)
    mask = np.zeros_like(windows, dtype=bool)
    np.put_along_axis(mask, winner[..., None], True, axis=-1)
    return np.take_along_axis(windows, winner[..., None], axis=-1)[..., 0], mask


def max_pool_backward(grad: np.ndarray, mask: np.ndarray) -> np.ndarray:
    n, c, half_rows, half_cols, _ = mask.shape
    spread = mask * grad[..., None]
    return spread.reshape(n, c, half_rows, half_cols, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, 2 * half_rows, 2 * half_cols
    )
