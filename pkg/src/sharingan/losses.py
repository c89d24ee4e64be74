"""Training losses and their weighted combination."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .decoders import HEATMAP_SIZE, ContractError
from .tensor import Tensor

GT_SIGMA = 3.0
BCE_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    reg: float = 100.0
    ang: float = 3.0
    io: float = 1.0

    @classmethod
    def for_variant(cls, variant: str) -> "LossWeights":
        return cls(reg=1000.0 if variant == "heatmap" else 100.0)

    def __post_init__(self):
        if min(self.reg, self.ang, self.io) < 0:
            raise ValueError("loss weights must be nonnegative")


def loss_heatmap(pred: Tensor, gt) -> Tensor:
    """Per-instance sum of squared cell differences over the trailing two axes."""
    gt = T.as_tensor(gt, like=pred)
    if pred.shape != gt.shape:
        raise ContractError(f"heatmap shapes differ: {pred.shape} vs {gt.shape}")
    d = pred - gt
    return (d * d).sum(axis=(-2, -1))


def loss_point(pred: Tensor, gt) -> Tensor:
    """Squared Euclidean distance over the last axis."""
    d = pred - T.as_tensor(gt, like=pred)
    return (d * d).sum(axis=-1)


def normalize_directions(v: np.ndarray, eps: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Unit-normalize target directions; the mask marks rows usable as targets."""
    v = np.asarray(v, dtype=np.float64)
    n = np.sqrt((v * v).sum(axis=-1, keepdims=True))
    valid = n[..., 0] > eps
    return v / np.maximum(n, eps), valid


def loss_angular(pred: Tensor, gt) -> tuple[Tensor, np.ndarray]:
    """1 - <gt, pred> with gt normalized here; also returns the valid-target mask."""
    unit, valid = normalize_directions(gt)
    cos = (pred * unit.astype(pred.dtype)).sum(axis=-1)
    return 1.0 - cos, valid


def loss_inout(prob: Tensor, label) -> Tensor:
    """Binary cross-entropy on probabilities clamped to [eps, 1 - eps]."""
    y = np.asarray(label, dtype=prob.dtype)
    p = T.clip(prob, BCE_EPS, 1.0 - BCE_EPS)
    return -(T.log(p) * y + T.log(1.0 - p) * (1.0 - y))


def masked_mean(values: Tensor, mask: np.ndarray) -> Tensor | None:
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        return None
    return (values * mask.astype(values.dtype)).sum() * (1.0 / count)


def global_loss(parts: dict, weights: LossWeights, mask: np.ndarray,
                reg_mask: np.ndarray | None = None, ang_mask: np.ndarray | None = None) -> tuple[Tensor, dict]:
    """Weighted sum of masked means of the per-person loss terms.

    ``parts`` maps 'reg', 'ang', 'io' to per-person loss tensors of equal
    shape. ``mask`` selects real persons (in-out term); ``reg_mask`` and
    ``ang_mask`` further restrict the regression and angular terms.
    Returns the scalar loss and the unweighted term values.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ContractError("every person slot in the batch is masked out")
    reg_mask = mask if reg_mask is None else mask & reg_mask
    ang_mask = reg_mask if ang_mask is None else mask & ang_mask
    terms = {
        "reg": masked_mean(parts["reg"], reg_mask),
        "ang": masked_mean(parts["ang"], ang_mask),
        "io": masked_mean(parts["io"], mask),
    }
    total = None
    values = {}
    for key, lam in (("reg", weights.reg), ("ang", weights.ang), ("io", weights.io)):
        term = terms[key]
        values[key] = 0.0 if term is None else term.item()
        if term is None:
            continue
        total = term * lam if total is None else total + term * lam
    return total, values


def build_gt_heatmap(points: Sequence[Sequence[float]], size: int = HEATMAP_SIZE, sigma: float = GT_SIGMA) -> np.ndarray:
    """Max-composition of unnormalized Gaussians (peak 1) centered on each point's cell."""
    if len(points) == 0:
        raise ContractError("a ground-truth heatmap needs at least one point")
    rows = np.arange(size)[:, None]
    cols = np.arange(size)[None, :]
    out = np.zeros((size, size))
    for x, y in points:
        r, c = point_to_cell(x, y, size)
        g = np.exp(-((rows - r) ** 2 + (cols - c) ** 2) / (2.0 * sigma**2))
        np.maximum(out, g, out=out)
    return out


def point_to_cell(x: float, y: float, size: int = HEATMAP_SIZE) -> tuple[int, int]:
    """(row, col) of the cell containing normalized point (x, y)."""
    return min(int(np.floor(y * size)), size - 1), min(int(np.floor(x * size)), size - 1)
