"""Evaluation metrics: annotator distances, heatmap AUC, in-out average precision."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .decoders import HEATMAP_SIZE, ContractError
from .losses import point_to_cell


@dataclass
class MetricReport:
    avg_dist: float
    min_dist: float
    ap: float
    n_instances: int
    auc: float | None = None

    def rows(self) -> list[tuple[str, float]]:
        rows = [("avg_dist", self.avg_dist), ("min_dist", self.min_dist)]
        if self.auc is not None:
            rows.append(("auc", self.auc))
        rows += [("ap", self.ap), ("n_instances", float(self.n_instances))]
        return rows

    def format(self) -> str:
        return "".join(f"{name}\t{value:.6f}\n" for name, value in self.rows())


def metric_distances(pred: Sequence[float], points: Sequence[Sequence[float]]) -> tuple[float, float]:
    """(distance to the annotators' mean point, distance to the nearest annotator point)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0:
        raise ContractError("distance metrics need at least one annotator point")
    p = np.asarray(pred, dtype=np.float64)
    avg = float(np.linalg.norm(p - pts.mean(axis=0)))
    mn = float(np.min(np.linalg.norm(pts - p, axis=1)))
    return avg, mn


def auc_from_scores(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """ROC AUC via the rank-sum statistic (ties count one half); None if undefined."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def metric_auc(heatmap: np.ndarray, points: Sequence[Sequence[float]]) -> float | None:
    """AUC of heatmap scores against a binary grid marking each annotator point's cell."""
    heatmap = np.asarray(heatmap)
    if len(points) == 0:
        raise ContractError("AUC needs at least one annotator point")
    size = heatmap.shape[-1]
    grid = np.zeros(heatmap.shape, dtype=bool)
    for x, y in points:
        grid[point_to_cell(x, y, size)] = True
    return auc_from_scores(heatmap, grid)


def metric_ap(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Average precision: area under the interpolated (envelope) precision-recall curve.

    Scores are swept in descending order; tied scores form a single threshold.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ContractError("average precision needs at least one positive label")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    precision = tp[last] / (tp[last] + fp[last])
    recall = tp[last] / n_pos
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * envelope))


def summarize(preds: np.ndarray, annotations: Sequence[Sequence[Sequence[float]]], inout_probs: np.ndarray,
              inout_labels: np.ndarray, heatmaps: np.ndarray | None = None) -> MetricReport:
    """Aggregate per-person predictions into a report.

    Distances and AUC are averaged over in-frame instances; AP uses all
    instances and is NaN when no positive label is present.
    """
    labels = np.asarray(inout_labels).astype(bool)
    avg, mn, aucs = [], [], []
    for i in np.nonzero(labels)[0]:
        a, m = metric_distances(preds[i], annotations[i])
        avg.append(a)
        mn.append(m)
        if heatmaps is not None:
            auc = metric_auc(heatmaps[i], annotations[i])
            if auc is not None:
                aucs.append(auc)
    ap = metric_ap(inout_probs, labels) if labels.any() else float("nan")
    return MetricReport(
        avg_dist=float(np.mean(avg)) if avg else float("nan"),
        min_dist=float(np.mean(mn)) if mn else float("nan"),
        ap=ap,
        n_instances=len(avg),
        auc=(float(np.mean(aucs)) if aucs else float("nan")) if heatmaps is not None else None,
    )
