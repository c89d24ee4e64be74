"""Gaze decoders: DPT-style heatmap, MLP point regression, and the in-out head."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import MLP, Conv2d, Module
from .tensor import ConfigurationError, Tensor

HEATMAP_SIZE = 64


class ContractError(ValueError):
    """Raised when a caller violates an operation's preconditions."""


class ResidualConvUnit(Module):
    def __init__(self, width: int, rng: np.random.Generator):
        self.conv1 = Conv2d(width, width, 3, rng, padding=1)
        # small output gain so each unit starts close to the identity
        self.conv2 = Conv2d(width, width, 3, rng, padding=1, gain=0.1)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv2(T.gelu(self.conv1(T.gelu(x))))


class FusionBlock(Module):
    def __init__(self, width: int, rng: np.random.Generator, with_skip: bool = True):
        self.skip_unit = ResidualConvUnit(width, rng) if with_skip else None
        self.unit = ResidualConvUnit(width, rng)
        self.out_conv = Conv2d(width, width, 1, rng, gain=1.0)

    def forward(self, x: Tensor, skip: Tensor | None, out_size: tuple[int, int]) -> Tensor:
        if skip is not None:
            x = x + self.skip_unit(skip)
        x = self.unit(x)
        x = T.bilinear_resize(x, *out_size)
        return self.out_conv(x)


def _half_padding(size: int):
    return 1 if size % 2 else (1, 0)


class DPTHeatmapDecoder(Module):
    """Reassemble four encoder taps into a multi-resolution pyramid and fuse it into a heatmap.

    The shallowest tap lands at 4x the token grid, the deepest at half of it.
    """

    def __init__(self, dim: int, grid: int, rng: np.random.Generator,
                 stage_channels: Sequence[int] | None = None, fusion_width: int = 64):
        if stage_channels is None:
            stage_channels = [max(dim // 8, 1), max(dim // 4, 1), max(dim // 2, 1), dim]
        if len(stage_channels) != 4:
            raise ConfigurationError("the heatmap decoder uses exactly 4 stages")
        self.grid = grid
        half = (grid + 1) // 2
        self.sizes = [4 * grid, 2 * grid, grid, half]
        self.project = [Conv2d(dim, c, 1, rng, gain=1.0) for c in stage_channels]
        self.downsample = Conv2d(stage_channels[3], stage_channels[3], 3, rng, stride=2,
                                 padding=_half_padding(grid), gain=1.0)
        self.layer_rn = [Conv2d(c, fusion_width, 3, rng, padding=1, bias=False, gain=1.0) for c in stage_channels]
        self.fusion = [FusionBlock(fusion_width, rng, with_skip=(i < 3)) for i in range(4)]
        self.head1 = Conv2d(fusion_width, max(fusion_width // 2, 1), 3, rng, padding=1)
        self.head2 = Conv2d(max(fusion_width // 2, 1), 1, 1, rng)
        # a zero output layer starts training from a flat map
        self.head2.weight.data[:] = 0.0

    def reassemble(self, tap: Tensor, n_image: int) -> Tensor:
        B, _, D = tap.shape
        x = tap[:, :n_image, :].reshape(B, self.grid, self.grid, D)
        return x.transpose(0, 3, 1, 2)

    def forward(self, taps: Sequence[Tensor], n_image: int, n_persons: int = 1) -> Tensor:
        """``taps`` are encoder states [B, N_t, D], shallowest first."""
        if n_persons != 1:
            raise ContractError(f"the heatmap decoder is single-person, got {n_persons} person tokens")
        if len(taps) != 4:
            raise ConfigurationError(f"the heatmap decoder needs exactly 4 taps, got {len(taps)}")
        if n_image != self.grid * self.grid:
            raise ConfigurationError(f"{n_image} image tokens do not form a {self.grid}x{self.grid} grid")
        feats = []
        for i, tap in enumerate(taps):
            x = self.project[i](self.reassemble(tap, n_image))
            if i < 2:
                x = T.bilinear_resize(x, self.sizes[i], self.sizes[i])
            elif i == 3:
                x = self.downsample(x)
            feats.append(self.layer_rn[i](x))
        path = self.fusion[3](feats[3], None, (self.sizes[2], self.sizes[2]))
        path = self.fusion[2](path, feats[2], (self.sizes[1], self.sizes[1]))
        path = self.fusion[1](path, feats[1], (self.sizes[0], self.sizes[0]))
        path = self.fusion[0](path, feats[0], (2 * self.sizes[0], 2 * self.sizes[0]))
        out = self.head2(T.gelu(self.head1(path)))
        out = T.bilinear_resize(out, HEATMAP_SIZE, HEATMAP_SIZE)
        return out.reshape(out.shape[0], HEATMAP_SIZE, HEATMAP_SIZE)


class PointDecoder(Module):
    """MLP D -> D -> D/2 -> 2 with a sigmoid per coordinate."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.mlp = MLP([dim, dim, dim // 2, 2], rng)

    def forward(self, x_person: Tensor) -> Tensor:
        return T.sigmoid(self.mlp(x_person))


class InOutHead(Module):
    """Seven affine layers over [x_out, x_g] with output widths 2D, D, D/2, D/4, D/8, D/16, 1."""

    def __init__(self, dim: int, rng: np.random.Generator):
        if dim % 16:
            raise ConfigurationError(f"in-out head needs D divisible by 16, got {dim}")
        widths = [2 * dim, 2 * dim, dim, dim // 2, dim // 4, dim // 8, dim // 16, 1]
        self.mlp = MLP(widths, rng)

    def forward(self, x_out: Tensor, x_g: Tensor) -> Tensor:
        z = self.mlp(T.concat([x_out, x_g], axis=-1))
        return T.sigmoid(z.reshape(z.shape[:-1]))


def cell_center(row: int, col: int, size: int = HEATMAP_SIZE) -> tuple[float, float]:
    return (col + 0.5) / size, (row + 0.5) / size


def heatmap_argmax(heatmap) -> np.ndarray:
    """Normalized (x, y) of the max cell; ties go to the smallest row, then column.

    Accepts [H, W] or [B, H, W]; returns [2] or [B, 2].
    """
    a = np.asarray(heatmap.data if isinstance(heatmap, Tensor) else heatmap)
    single = a.ndim == 2
    a = a.reshape((-1,) + a.shape[-2:])
    H, W = a.shape[-2:]
    flat = a.reshape(a.shape[0], -1).argmax(axis=1)
    rows, cols = np.divmod(flat, W)
    out = np.stack([(cols + 0.5) / W, (rows + 0.5) / H], axis=1)
    return out[0] if single else out
