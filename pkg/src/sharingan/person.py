"""Person gaze tokens: head crop + head box -> location-aware token."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import MLP, Conv2d, Linear, Module
from .tensor import ConfigurationError, Tensor


class CapacityError(ValueError):
    """More persons than the model has token slots."""


@dataclass
class PersonInput:
    h_crop: np.ndarray  # [h, w, C] pixels (uint8 or float in [0, 1])
    h_bbox: tuple[float, float, float, float]
    is_pad: bool = False

    def __post_init__(self):
        x0, y0, x1, y1 = self.h_bbox
        if not (0.0 <= x0 <= x1 <= 1.0 and 0.0 <= y0 <= y1 <= 1.0):
            raise ValueError(f"invalid head box {self.h_bbox}")

    @classmethod
    def pad(cls, crop_size: int, channels: int = 3) -> "PersonInput":
        """Black-image slot for an absent person."""
        return cls(np.zeros((crop_size, crop_size, channels), dtype=np.uint8), (0.0, 0.0, 0.0, 0.0), True)


def pad_persons(persons: Sequence[PersonInput], capacity: int, crop_size: int,
                channels: int = 3) -> tuple[list[PersonInput], np.ndarray]:
    """Fill ``capacity`` slots: real persons first, in order, then black pads."""
    if len(persons) > capacity:
        raise CapacityError(f"{len(persons)} persons exceed capacity {capacity}; split them into chunks")
    slots = list(persons) + [PersonInput.pad(crop_size, channels) for _ in range(capacity - len(persons))]
    mask = np.array([not p.is_pad for p in slots], dtype=bool)
    return slots, mask


class GazeBackbone(Module):
    """Four stride-2 3x3 conv blocks with GELU, then global average pooling."""

    def __init__(self, channels: Sequence[int], rng: np.random.Generator, in_channels: int = 3):
        widths = [in_channels, *channels]
        self.convs = [Conv2d(a, b, 3, rng, stride=2, padding=(1, 0)) for a, b in zip(widths[:-1], widths[1:])]
        self.d_emb = widths[-1]

    def forward(self, crops: Tensor) -> Tensor:
        """[M, h, w, C] standardized crops -> [M, d_emb]."""
        x = crops.transpose(0, 3, 1, 2)
        size = x.shape[2]
        if x.shape[2] != x.shape[3] or size % (2 ** len(self.convs)):
            raise ConfigurationError(
                f"head crops must be square with side divisible by {2 ** len(self.convs)}, got {crops.shape[1:3]}"
            )
        for conv in self.convs:
            x = T.gelu(conv(x))
        return T.global_average_pool(x)


def predict_gaze_vector(raw: Tensor, eps: float = 1e-8) -> tuple[Tensor, np.ndarray]:
    """Normalize raw 2D gaze predictions; also return a mask of degenerate (near-zero) rows."""
    norms = np.sqrt((raw.data * raw.data).sum(axis=-1))
    return T.l2_normalize(raw, eps), norms < eps


def make_gaze_token(g_emb: Tensor, h_bbox: Tensor, p_gaze: Linear, p_bbox: Linear) -> Tensor:
    """x^g = P_gaze(g_emb) + P_bbox(h_bbox)."""
    return p_gaze(g_emb) + p_bbox(h_bbox)


class PersonModule(Module):
    def __init__(self, dim: int, backbone_channels: Sequence[int], rng: np.random.Generator,
                 gpred_hidden: int = 128):
        self.backbone = GazeBackbone(backbone_channels, rng)
        d_emb = self.backbone.d_emb
        self.gpred = MLP([d_emb, gpred_hidden, 2], rng)
        self.p_gaze = Linear(d_emb, dim, rng)
        self.p_bbox = Linear(4, dim, rng)

    def forward(self, crops: Tensor, bboxes: Tensor) -> dict:
        """crops [B, Np, h, w, C], bboxes [B, Np, 4] -> embeddings, unit gaze vectors and tokens."""
        B, Np = crops.shape[:2]
        flat = crops.reshape((B * Np,) + crops.shape[2:])
        g_emb = self.backbone(flat).reshape(B, Np, self.backbone.d_emb)
        gaze_vec, degenerate = predict_gaze_vector(self.gpred(g_emb))
        x_g = make_gaze_token(g_emb, bboxes, self.p_gaze, self.p_bbox)
        return {"g_emb": g_emb, "gaze_vec": gaze_vec, "gaze_degenerate": degenerate, "x_g": x_g}
