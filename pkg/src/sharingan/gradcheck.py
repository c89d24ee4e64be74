"""Central finite-difference checking of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward, debug_mode


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    n_checked: int
    worst_index: tuple = ()


@dataclass
class GradCheckReport:
    tol: float
    checks: list[ParamCheck] = field(default_factory=list)
    error: str | None = None

    @property
    def passed(self) -> bool:
        return self.error is None and all(c.max_rel_err <= self.tol for c in self.checks)

    @property
    def max_rel_err(self) -> float:
        return max((c.max_rel_err for c in self.checks), default=float("nan"))

    def failures(self) -> list[ParamCheck]:
        return [c for c in self.checks if not c.max_rel_err <= self.tol]

    def format(self) -> str:
        lines = [f"{c.name}\t{c.max_rel_err:.3e}\t{c.n_checked}\t{'ok' if c.max_rel_err <= self.tol else 'FAIL'}"
                 for c in self.checks]
        if self.error:
            lines.append(f"error\t{self.error}")
        lines.append(f"result\t{'PASS' if self.passed else 'FAIL'}\ttol={self.tol:g}")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Entrywise |a - n| / max(|a|, |n|, 1e-3 * max|n|, 1e-12).

    Entries a thousand times smaller than the tensor's largest numeric
    gradient are measured against that largest magnitude instead of their own.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    floor = max(1e-3 * float(np.max(np.abs(n), initial=0.0)), 1e-12)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return np.abs(a - n) / denom


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backprop gradients of scalar ``f()`` with central differences.

    ``f`` is re-evaluated after perturbing entries of each tensor in
    ``params`` in place. With ``max_entries`` set, a seeded random subset of
    that many entries per tensor is probed.
    """
    report = GradCheckReport(tol=tol)
    for p in params.values():
        if p.dtype != np.float64:
            raise TypeError("grad_check requires float64 tensors")
        p.grad = None
    try:
        with debug_mode():
            loss = f()
            if loss.size != 1:
                raise ValueError(f"grad_check needs a scalar function, got shape {loss.shape}")
            backward(loss)
    except FloatingPointError as exc:
        report.error = str(exc)
        return report

    rng = np.random.default_rng(seed)
    for name, p in params.items():
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        if max_entries is None or flat.size <= max_entries:
            idx = np.arange(flat.size)
        else:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        try:
            with debug_mode():
                for k, i in enumerate(idx):
                    orig = flat[i]
                    flat[i] = orig + h
                    fp = f().item()
                    flat[i] = orig - h
                    fm = f().item()
                    flat[i] = orig
                    numeric[k] = (fp - fm) / (2 * h)
        except FloatingPointError as exc:
            flat[i] = orig
            report.error = f"{name}: {exc}"
            return report
        err = relative_error(analytic.reshape(-1)[idx], numeric)
        worst = int(np.argmax(err)) if err.size else 0
        report.checks.append(
            ParamCheck(
                name=name,
                max_rel_err=float(err.max()) if err.size else 0.0,
                n_checked=int(idx.size),
                worst_index=tuple(np.unravel_index(idx[worst], p.shape)) if err.size else (),
            )
        )
    return report


def micro_problem(variant: str, seed: int = 0, batch: int = 2):
    """Micro-scale f64 model plus a fixed random batch and its scalar training loss."""
    from . import tensor as T
    from .losses import LossWeights, build_gt_heatmap, global_loss, loss_angular, loss_heatmap, loss_inout, loss_point
    from .model import Sharingan, micro
    from .tokens import standardize

    cfg = micro(variant)
    rng = np.random.default_rng(seed)
    with T.default_dtype(np.float64):
        model = Sharingan(cfg, seed=seed)
    if variant == "heatmap":
        # the zero-initialized output conv would block gradient to the rest of the decoder
        w = model.heatmap_decoder.head2.weight
        w.data = rng.normal(0.0, 0.02, size=w.shape)
        # likewise the near-identity residual units; check at a generic He-scale point
        for name, p in model.named_parameters():
            if name.endswith("conv2.weight"):
                p.data = rng.normal(0.0, np.sqrt(2.0 / np.prod(p.shape[1:])), size=p.shape)
    Np = cfg.n_persons
    images = standardize(rng.integers(0, 256, (batch, cfg.image_size, cfg.image_size, 3), dtype=np.uint8),
                         dtype=np.float64)
    crops = standardize(rng.integers(0, 256, (batch, Np, cfg.crop_size, cfg.crop_size, 3), dtype=np.uint8),
                        dtype=np.float64)
    lo = rng.uniform(0.0, 0.7, (batch, Np, 2))
    bboxes = np.concatenate([lo, lo + rng.uniform(0.1, 0.3, (batch, Np, 2))], axis=-1)
    target = rng.uniform(0.05, 0.95, (batch, Np, 2))
    centers = (bboxes[..., :2] + bboxes[..., 2:]) / 2
    labels = np.ones((batch, Np), dtype=np.int64)
    labels[0, 0] = 0
    mask = np.ones((batch, Np), dtype=bool)
    # O(1) terms: the 64x64 heatmap sum would otherwise dominate the rounding noise of the differences
    weights = LossWeights(0.01 if variant == "heatmap" else 1.0, 1.0, 1.0)

    def loss() -> Tensor:
        with T.default_dtype(np.float64):
            out = model(images, crops, bboxes)
            if variant == "heatmap":
                gt = np.stack([build_gt_heatmap([t[0]]) for t in target])
                reg = loss_heatmap(out["heatmap"], gt).reshape(-1, 1)
            else:
                reg = loss_point(out["point"], target)
            ang, valid = loss_angular(out["gaze_vec"], target - centers)
            io = loss_inout(out["inout"], labels)
            total, _ = global_loss({"reg": reg, "ang": ang, "io": io}, weights, mask,
                                   reg_mask=labels.astype(bool), ang_mask=labels.astype(bool) & valid)
        return total

    return model, loss


def model_grad_check(scale: str = "micro", variant: str = "point", tol: float = 1e-4,
                     max_entries: int | None = 24, seed: int = 0) -> GradCheckReport:
    """End-to-end check of every parameter tensor of the micro model."""
    if scale != "micro":
        raise ValueError(f"unknown gradcheck scale {scale!r}")
    model, loss = micro_problem(variant, seed)
    return grad_check(loss, dict(model.named_parameters()), tol=tol, max_entries=max_entries, seed=seed)
