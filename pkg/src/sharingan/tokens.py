"""Image tokens: non-overlapping patches, linear projection, 2D sin-cos positions."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .nn import Linear, Module
from .tensor import ConfigurationError, Tensor

# per-channel constants applied after scaling 8-bit pixels to [0, 1]
PIXEL_MEAN = (0.5, 0.5, 0.5)
PIXEL_STD = (0.25, 0.25, 0.25)


def standardize(pixels: np.ndarray, mean=PIXEL_MEAN, std=PIXEL_STD, dtype=None) -> np.ndarray:
    """Map uint8 (0..255) or float [0, 1] pixels of shape [..., C] to standardized floats."""
    dtype = dtype or T.get_default_dtype()
    x = np.asarray(pixels)
    if x.dtype == np.uint8:
        x = x.astype(np.float64) / 255.0
    return ((x - np.asarray(mean)) / np.asarray(std)).astype(dtype)


@dataclass
class PatchGrid:
    grid_h: int
    grid_w: int
    patch: int
    patches: Tensor  # [..., N, P*P*C]

    @property
    def n(self) -> int:
        return self.grid_h * self.grid_w


def patchify(image, patch: int) -> PatchGrid:
    """Split [H, W, C] (or [B, H, W, C]) into row-major P x P patches.

    Each patch vector lists its block's pixels in raster order with channels
    innermost.
    """
    image = T.as_tensor(image)
    *lead, H, W, C = image.shape
    if H % patch or W % patch:
        raise ConfigurationError(f"image {H}x{W} is not divisible by patch size {patch}")
    gh, gw = H // patch, W // patch
    lead = tuple(lead)
    nl = len(lead)
    x = image.reshape(lead + (gh, patch, gw, patch, C))
    axes = tuple(range(nl)) + tuple(nl + a for a in (0, 2, 1, 3, 4))
    x = x.transpose(axes).reshape(lead + (gh * gw, patch * patch * C))
    return PatchGrid(gh, gw, patch, x)


def unpatchify(grid: PatchGrid, channels: int) -> Tensor:
    p = grid.patch
    lead = grid.patches.shape[:-2]
    nl = len(lead)
    x = grid.patches.reshape(lead + (grid.grid_h, grid.grid_w, p, p, channels))
    axes = tuple(range(nl)) + tuple(nl + a for a in (0, 2, 1, 3, 4))
    return x.transpose(axes).reshape(lead + (grid.grid_h * p, grid.grid_w * p, channels))


def embed_patches(grid: PatchGrid, proj: Linear) -> Tensor:
    width = grid.patches.shape[-1]
    if proj.d_in != width:
        raise ConfigurationError(f"patch projection expects {proj.d_in} inputs, patches have {width}")
    return proj(grid.patches)


def _posenc_1d(positions: np.ndarray, dim: int) -> np.ndarray:
    omega = 1.0 / 10000.0 ** (np.arange(dim // 2) / (dim / 2.0))
    angles = positions[:, None] * omega[None, :]
    out = np.empty((positions.size, dim))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


@lru_cache(maxsize=32)
def _posenc_table(grid_h: int, grid_w: int, dim: int) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    half = dim // 2
    table = np.concatenate(
        [_posenc_1d(rows.reshape(-1).astype(np.float64), half),
         _posenc_1d(cols.reshape(-1).astype(np.float64), half)],
        axis=1,
    )
    table.setflags(write=False)
    return table


def posenc_2d(grid_h: int, grid_w: int, dim: int) -> np.ndarray:
    """Fixed [N, D] table: first D/2 channels encode the row, last D/2 the column.

    Within each half, channel 2i is sin(pos * w_i) and 2i+1 is cos(pos * w_i)
    with w_i = 10000 ** (-2i / (D/2)).
    """
    if dim % 4:
        raise ConfigurationError(f"2D sin-cos encoding needs D divisible by 4, got {dim}")
    return _posenc_table(grid_h, grid_w, dim)


class ImageTokenizer(Module):
    def __init__(self, image_size: int, patch: int, channels: int, dim: int, rng: np.random.Generator):
        if image_size % patch:
            raise ConfigurationError(f"image size {image_size} is not divisible by patch size {patch}")
        self.patch = patch
        self.grid = image_size // patch
        self.proj = Linear(patch * patch * channels, dim, rng)
        self.dim = dim

    def forward(self, images: Tensor) -> Tensor:
        """[B, H, W, C] standardized images -> [B, N, D] tokens."""
        grid = patchify(images, self.patch)
        x = embed_patches(grid, self.proj)
        pe = posenc_2d(grid.grid_h, grid.grid_w, self.dim).astype(x.dtype)
        return x + pe
