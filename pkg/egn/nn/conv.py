"""
Convolution and resampling on top of the `take` gather: an index table maps
every output element to an input element (or to -1 for zero padding).
"""
from typing import Dict, Tuple

import numpy as np

from ..errors import DimensionError
from ..tensor import Tensor, matmul, reshape, take, transpose
from .base import Module, Parameter

__all__ = ["Conv2d", "Upsample2x", "im2col_index", "tile_index"]


def im2col_index(
    channels: int, height: int, width: int, kernel: int, stride: int, padding: int
) -> Tuple[np.ndarray, int, int]:
    """
    Index table of shape (out_h * out_w, channels * kernel * kernel) into a
    flattened (channels, height, width) image. Also returns (out_h, out_w).
    """
    out_h = (height + 2 * padding - kernel) // stride + 1
    out_w = (width + 2 * padding - kernel) // stride + 1
    if out_h <= 0 or out_w <= 0:
        raise DimensionError(f"Kernel {kernel} doesn't fit a {height}x{width} input.")

    oy, ox = np.meshgrid(np.arange(out_h), np.arange(out_w), indexing="ij")
    c, ky, kx = np.meshgrid(
        np.arange(channels), np.arange(kernel), np.arange(kernel), indexing="ij"
    )
    iy = oy.reshape(-1, 1) * stride - padding + ky.reshape(1, -1)
    ix = ox.reshape(-1, 1) * stride - padding + kx.reshape(1, -1)
    valid = (iy >= 0) & (iy < height) & (ix >= 0) & (ix < width)
    flat = c.reshape(1, -1) * height * width + iy * width + ix
    return np.where(valid, flat, -1), out_h, out_w


def tile_index(channels: int, size: int, patch: int) -> np.ndarray:
    """
    Index table of shape (L, channels * patch * patch) that tiles a square
    image into non-overlapping patches, row-major over the patch grid. Each
    patch is flattened channel first.
    """
    if size % patch:
        raise DimensionError(f"Image size {size} is not divisible by patch size {patch}.")
    grid = size // patch
    gy, gx = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    c, py, px = np.meshgrid(
        np.arange(channels), np.arange(patch), np.arange(patch), indexing="ij"
    )
    y = gy.reshape(-1, 1) * patch + py.reshape(1, -1)
    x = gx.reshape(-1, 1) * patch + px.reshape(1, -1)
    return c.reshape(1, -1) * size * size + y * size + x


class Conv2d(Module):
    """
    2D convolution on (batch, channels, height, width) tensors.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
    ) -> None:
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding

        fan_in = in_channels * kernel_size * kernel_size
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = Parameter(rng.uniform(-bound, bound, (fan_in, out_channels)))
        self.bias = Parameter(rng.uniform(-bound, bound, out_channels))

        self._index_cache: Dict[Tuple[int, int], Tuple[np.ndarray, int, int]] = {}

    def output_size(self, height: int, width: int) -> Tuple[int, int]:
        _, out_h, out_w = self._index(height, width)
        return out_h, out_w

    def _index(self, height: int, width: int) -> Tuple[np.ndarray, int, int]:
        key = (height, width)
        if key not in self._index_cache:
            self._index_cache[key] = im2col_index(
                self.in_channels, height, width, self.kernel_size, self.stride, self.padding
            )
        return self._index_cache[key]

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(
                f"Conv2d expects (B, {self.in_channels}, H, W), got {x.shape}."
            )
        batch, channels, height, width = x.shape
        index, out_h, out_w = self._index(height, width)

        columns = take(reshape(x, (batch, channels * height * width)), index)
        out = matmul(columns, self.weight) + self.bias
        out = transpose(out, (0, 2, 1))
        return reshape(out, (batch, self.out_channels, out_h, out_w))


class Upsample2x(Module):
    """
    Nearest-neighbour upsampling by a factor of two.
    """

    def __init__(self) -> None:
        self._index_cache: Dict[Tuple[int, int, int], np.ndarray] = {}

    def forward(self, x: Tensor) -> Tensor:
        batch, channels, height, width = x.shape
        key = (channels, height, width)
        if key not in self._index_cache:
            c, y, xx = np.meshgrid(
                np.arange(channels), np.arange(2 * height), np.arange(2 * width), indexing="ij"
            )
            self._index_cache[key] = c * height * width + (y // 2) * width + xx // 2
        out = take(reshape(x, (batch, channels * height * width)), self._index_cache[key])
        return out
