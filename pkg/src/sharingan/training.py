"""Optimization loop: AdamW, warm-restart cosine schedule, evaluation, checkpoints."""

from __future__ import annotations

import math
import os
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .config import TrainConfig, format_config, parse_config
from .data import GazeDataset
from .losses import LossWeights, build_gt_heatmap, global_loss, loss_angular, loss_heatmap, loss_inout, loss_point
from .metrics import MetricReport, summarize
from .model import Sharingan
from .nn import Module
from .tokens import standardize

CHECKPOINT_MAGIC = b"SHRN"
CHECKPOINT_VERSION = 1
DEFAULT_CAPACITY = 6
HISTORY_FILE = "history.tsv"


class TrainingError(RuntimeError):
    def __init__(self, step: int, msg: str):
        super().__init__(f"step {step}: {msg}")
        self.step = step


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, T.Tensor]) -> "OptimizerState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()}, 0)


def adamw_step(params: dict[str, T.Tensor], state: OptimizerState, lr: float, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.01) -> None:
    """One AdamW update in place; missing gradients count as zero."""
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def lr_schedule(step: int, base_lr: float, warmup_steps: int = 200, restart_period: int = 1000,
                restart_mult: int = 2, lr_min: float = 1e-6) -> float:
    """Linear warmup from 0, then cosine annealing with warm restarts."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    t = step - warmup_steps
    period = restart_period
    while t >= period:
        t -= period
        period *= restart_mult
    return lr_min + (base_lr - lr_min) * (1.0 + math.cos(math.pi * t / period)) / 2.0


def scheduled_lr(cfg: TrainConfig, step: int) -> float:
    return lr_schedule(step, cfg.base_lr, cfg.warmup_steps, cfg.restart_period, cfg.restart_mult, cfg.lr_min)


def clip_grad_norm(params: Iterable[T.Tensor], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for g in grads:
            g *= scale
    return norm


# ---------------------------------------------------------------- batches


@dataclass
class Batch:
    images: np.ndarray  # [B, H, W, 3] uint8
    crops: np.ndarray  # [B, Np, c, c, 3] uint8
    bboxes: np.ndarray  # [B, Np, 4]
    mask: np.ndarray  # [B, Np] real person slots
    inout: np.ndarray  # [B, Np]
    points: list  # per slot: annotator points array (possibly empty)
    target: np.ndarray  # [B, Np, 2] mean annotator point, 0 where absent
    direction: np.ndarray  # [B, Np, 2] target minus head center
    scene_person: list  # per slot: (scene, person) or None

    def inputs(self, dtype=None):
        dtype = dtype or T.get_default_dtype()
        return (standardize(self.images, dtype=dtype), standardize(self.crops, dtype=dtype),
                self.bboxes.astype(dtype))


def make_batch(data: GazeDataset, groups: Sequence[tuple[int, Sequence[int]]], n_slots: int) -> Batch:
    """Pack (scene, persons) groups into fixed ``n_slots`` person slots, black-padded."""
    B = len(groups)
    c = data.crops.shape[2]
    batch = Batch(
        images=data.images[[s for s, _ in groups]],
        crops=np.zeros((B, n_slots, c, c, 3), dtype=np.uint8),
        bboxes=np.zeros((B, n_slots, 4)),
        mask=np.zeros((B, n_slots), dtype=bool),
        inout=np.zeros((B, n_slots), dtype=np.int64),
        points=[[np.zeros((0, 2))] * n_slots for _ in range(B)],
        target=np.zeros((B, n_slots, 2)),
        direction=np.zeros((B, n_slots, 2)),
        scene_person=[[None] * n_slots for _ in range(B)],
    )
    for b, (s, persons) in enumerate(groups):
        if len(persons) > n_slots:
            raise ValueError(f"group of {len(persons)} persons does not fit {n_slots} slots")
        for j, p in enumerate(persons):
            batch.crops[b, j] = data.crops[s, p]
            box = data.bboxes[s, p]
            batch.bboxes[b, j] = box
            batch.mask[b, j] = True
            batch.inout[b, j] = data.inout[s, p]
            pts = data.annotator_points(s, p)
            batch.points[b][j] = pts
            batch.scene_person[b][j] = (s, p)
            if len(pts) and data.inout[s, p]:
                mean = pts.mean(axis=0)
                batch.target[b, j] = mean
                batch.direction[b, j] = mean - np.array([(box[0] + box[2]) / 2, (box[1] + box[3]) / 2])
    return batch


def flip_batch(batch: Batch, flags: np.ndarray) -> Batch:
    """Mirror the flagged batch rows left-right; the off-screen band (top edge) is unaffected."""
    flags = np.asarray(flags, dtype=bool)
    if not flags.any():
        return batch
    images, crops, bboxes = batch.images.copy(), batch.crops.copy(), batch.bboxes.copy()
    target, direction = batch.target.copy(), batch.direction.copy()
    points = [list(row) for row in batch.points]
    for b in np.flatnonzero(flags):
        images[b] = images[b, :, ::-1]
        crops[b] = crops[b, :, :, ::-1]
        m = batch.mask[b]
        bboxes[b, m] = np.stack([1.0 - bboxes[b, m, 2], bboxes[b, m, 1], 1.0 - bboxes[b, m, 0], bboxes[b, m, 3]], -1)
        has = batch.inout[b].astype(bool) & m
        target[b, has, 0] = 1.0 - target[b, has, 0]
        direction[b, :, 0] = -direction[b, :, 0]
        points[b] = [np.column_stack([1.0 - p[:, 0], p[:, 1]]) if len(p) else p for p in points[b]]
    return Batch(images, crops, bboxes, batch.mask, batch.inout, points, target, direction, batch.scene_person)


class BatchStream:
    """Deterministic step -> chunk indices map over per-epoch permutations seeded by (seed, epoch)."""

    def __init__(self, n_items: int, batch_size: int, seed: int):
        if n_items <= 0:
            raise ValueError("training set is empty")
        self.n = n_items
        self.batch_size = batch_size
        self.seed = seed
        self._cache: dict[int, np.ndarray] = {}

    def permutation(self, epoch: int) -> np.ndarray:
        if epoch not in self._cache:
            if len(self._cache) > 4:
                self._cache.clear()
            self._cache[epoch] = np.random.default_rng([self.seed, epoch]).permutation(self.n)
        return self._cache[epoch]

    def indices(self, step: int) -> np.ndarray:
        """Chunk indices consumed by zero-based ``step``."""
        start = step * self.batch_size
        out = []
        for pos in range(start, start + self.batch_size):
            epoch, i = divmod(pos, self.n)
            out.append(self.permutation(epoch)[i])
        return np.asarray(out)


# ---------------------------------------------------------------- loss


def batch_loss(model: Sharingan, batch: Batch, weights: LossWeights) -> tuple[T.Tensor, dict]:
    """Forward pass and the masked global loss for one batch."""
    out = model(*batch.inputs())
    labels = batch.inout.astype(bool)
    if model.cfg.variant == "heatmap":
        gt = np.zeros((len(batch.points), 64, 64))
        for b, slots in enumerate(batch.points):
            if labels[b, 0] and len(slots[0]):
                gt[b] = build_gt_heatmap(slots[0])
        reg = loss_heatmap(out["heatmap"], gt).reshape(-1, 1)
    else:
        reg = loss_point(out["point"], batch.target)
    ang, valid = loss_angular(out["gaze_vec"], batch.direction)
    io = loss_inout(out["inout"], batch.inout)
    return global_loss({"reg": reg, "ang": ang, "io": io}, weights, batch.mask,
                       reg_mask=labels, ang_mask=labels & valid)


# ---------------------------------------------------------------- evaluation


def eval_groups(data: GazeDataset, n_slots: int, context: bool = False) -> list[tuple[int, tuple[int, ...], int]]:
    """Forward-pass groups as (scene, persons, n_scored).

    Chunked mode splits each scene into groups of ``n_slots`` and scores all
    of them. Context mode scores one person per pass, accompanied by the next
    ``n_slots - 1`` persons of the scene in cyclic order.
    """
    out = []
    for s in range(len(data)):
        n = int(data.n_persons[s])
        if context:
            for i in range(n):
                group = tuple((i + k) % n for k in range(min(n_slots, n)))
                out.append((s, group, 1))
        else:
            for i in range(0, n, n_slots):
                group = tuple(range(i, min(i + n_slots, n)))
                out.append((s, group, len(group)))
    return out


def evaluate(model: Sharingan, data: GazeDataset, n_slots: int | None = None, batch_size: int = 64,
             context: bool = False) -> MetricReport:
    """Metrics over every real person of ``data``; see :func:`eval_groups` for the grouping."""
    cfg = model.cfg
    n_slots = 1 if cfg.variant == "heatmap" else (n_slots or cfg.n_persons)
    groups = eval_groups(data, n_slots, context)
    preds, probs, labels, anns, maps = [], [], [], [], []
    for i in range(0, len(groups), batch_size):
        part = groups[i : i + batch_size]
        batch = make_batch(data, [(s, g) for s, g, _ in part], n_slots)
        res = model.predict(*batch.inputs())
        for b, (s, g, n_scored) in enumerate(part):
            for j in range(n_scored):
                preds.append(res["point"][b, j].astype(np.float64))
                probs.append(float(res["inout"][b, j]))
                labels.append(int(batch.inout[b, j]))
                anns.append(batch.points[b][j])
                if "heatmap" in res:
                    maps.append(res["heatmap"][b])
    heatmaps = np.stack(maps) if maps else None
    return summarize(np.array(preds).reshape(-1, 2), anns, np.array(probs), np.array(labels), heatmaps)


def evaluate_np(model: Sharingan, data: GazeDataset, n_persons: int, batch_size: int = 64,
                capacity: int | None = None) -> MetricReport:
    """Evaluate with ``n_persons`` person tokens per pass (each person scored in context)."""
    capacity = capacity or eval_capacity(model)
    if n_persons > capacity:
        warnings.warn(f"n_persons {n_persons} exceeds capacity {capacity}; evaluating in chunks of {capacity}")
        n_persons = capacity
    return evaluate(model, data, n_persons, batch_size, context=True)


def eval_capacity(model: Sharingan) -> int:
    """Largest person count per pass; point models carry no per-slot weights."""
    return 1 if model.cfg.variant == "heatmap" else max(model.cfg.n_persons, DEFAULT_CAPACITY)


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    config: TrainConfig
    model: dict[str, np.ndarray]
    optimizer: OptimizerState
    step: int
    best_val: float


def _tensor_record(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def checkpoint_bytes(tensors: Sequence[tuple[str, np.ndarray]]) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    parts += [_tensor_record(n, a) for n, a in tensors]
    return b"".join(parts)


def parse_checkpoint_bytes(buf: bytes) -> dict[str, np.ndarray]:
    """Decode the container into name -> f32 array; any malformation raises CheckpointError."""
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    pos = 4

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8, "header"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out = {}
    for i in range(count):
        (n_name,) = struct.unpack("<H", take(2, f"tensor {i} name length"))
        name = take(n_name, f"tensor {i} name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, f"{name} rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"{name} dims"))
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(take(4 * size, f"{name} payload"), dtype="<f4").reshape(shape)
        if name in out:
            raise CheckpointError(f"duplicate tensor name {name}")
        out[name] = data.astype(np.float32)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after the last tensor")
    return out


def checkpoint_save(path, model: Module, state: OptimizerState, cfg: TrainConfig, step: int,
                    best_val: float = float("inf")) -> Path:
    """Write atomically: a partially written file never replaces an existing checkpoint."""
    path = Path(path)
    cfg_bytes = np.frombuffer(format_config(cfg).encode("utf-8"), dtype=np.uint8)
    tensors = [("meta.config", cfg_bytes), ("meta.step", np.array([step])),
               ("meta.optim_step", np.array([state.step])), ("meta.best_val", np.array([best_val]))]
    for name, p in model.named_parameters():
        tensors += [(f"model.{name}", p.data), (f"adam_m.{name}", state.m[name]), (f"adam_v.{name}", state.v[name])]
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(tensors))
    os.replace(tmp, path)
    return path


def checkpoint_load(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = parse_checkpoint_bytes(path.read_bytes())
    for key in ("meta.config", "meta.step", "meta.optim_step", "meta.best_val"):
        if key not in raw:
            raise CheckpointError(f"checkpoint lacks {key}")
    cfg = parse_config(raw["meta.config"].astype(np.uint8).tobytes().decode("utf-8"))
    model, m, v = {}, {}, {}
    for name, arr in raw.items():
        prefix, _, rest = name.partition(".")
        if prefix == "meta":
            continue
        target = {"model": model, "adam_m": m, "adam_v": v}.get(prefix)
        if target is None or not rest:
            raise CheckpointError(f"unknown tensor name {name!r}")
        target[rest] = arr
    for kind, moments in (("adam_m", m), ("adam_v", v)):
        odd = sorted(set(moments) ^ set(model))
        if odd:
            raise CheckpointError(f"{kind} moments do not match model parameters: {odd}")
    state = OptimizerState(m, v, int(raw["meta.optim_step"][0]))
    return Checkpoint(cfg, model, state, int(raw["meta.step"][0]), float(raw["meta.best_val"][0]))


def load_model(path) -> tuple[Sharingan, Checkpoint]:
    ckpt = checkpoint_load(path)
    model = Sharingan(ckpt.config.model_config(), seed=ckpt.config.model_seed)
    try:
        model.load_state_dict(ckpt.model)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint does not match its model: {exc}") from None
    return model, ckpt


# ---------------------------------------------------------------- training loop


def format_history(step: int, split: str, metric: str, value: float) -> str:
    return f"{step}\t{split}\t{metric}\t{value:.6f}\n"


def _trim_history(path: Path, up_to: int) -> None:
    if not path.exists():
        return
    keep = [ln for ln in path.read_text().splitlines(keepends=True) if int(ln.split("\t", 1)[0]) <= up_to]
    path.write_text("".join(keep))


@dataclass
class TrainResult:
    model: Sharingan
    step: int
    best_val: float
    history_path: Path
    last_checkpoint: Path | None
    best_checkpoint: Path | None
    final_report: MetricReport | None = None


def train(cfg: TrainConfig, train_set: GazeDataset, val_set: GazeDataset | None = None, resume=None,
          hooks: Sequence[Callable[[Sharingan, int], None]] = (), log: Callable[[str], None] | None = None,
          stop_at: int | None = None) -> TrainResult:
    """Run (or resume) training until ``cfg.total_steps``, or until ``stop_at`` when given.

    Checkpoints land in ``cfg.checkpoint_dir``: ``last.ckpt`` at each cadence
    point and at the end, ``best.ckpt`` whenever validation Avg Dist improves.
    ``hooks`` run after every optimizer step with (model, step).
    """
    out_dir = Path(cfg.checkpoint_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    history = out_dir / HISTORY_FILE
    model = Sharingan(cfg.model_config(), seed=cfg.model_seed)
    params = dict(model.named_parameters())
    state = OptimizerState.for_params(params)
    step, best_val = 0, float("inf")
    if resume is not None:
        ckpt = checkpoint_load(resume)
        model.load_state_dict(ckpt.model)
        state = OptimizerState({k: ckpt.optimizer.m[k].copy() for k in params},
                               {k: ckpt.optimizer.v[k].copy() for k in params}, ckpt.optimizer.step)
        step, best_val = ckpt.step, ckpt.best_val
        _trim_history(history, step)
    else:
        history.write_text("")

    weights = LossWeights(cfg.lambda_reg, cfg.lambda_ang, cfg.lambda_io)
    n_slots = cfg.n_persons
    chunks = train_set.chunks(n_slots)
    stream = BatchStream(len(chunks), cfg.batch_size, cfg.seed)
    last_ckpt = out_dir / "last.ckpt" if resume is not None or step else None
    best_ckpt = out_dir / "best.ckpt" if (out_dir / "best.ckpt").exists() and resume is not None else None
    end = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)
    report = None

    with history.open("a") as hist:
        while step < end:
            batch = make_batch(train_set, [chunks[i] for i in stream.indices(step)], n_slots)
            if cfg.hflip:
                batch = flip_batch(batch, np.random.default_rng([cfg.seed, step, 1]).random(len(batch.mask)) < 0.5)
            model.zero_grad()
            loss, parts = batch_loss(model, batch, weights)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(step + 1, f"non-finite loss {value}; last checkpoint retained")
            T.backward(loss)
            clip_grad_norm(params.values(), cfg.grad_clip)
            step += 1
            adamw_step(params, state, scheduled_lr(cfg, step), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
            for hook in hooks:
                hook(model, step)
            if step % cfg.log_every == 0 or step == cfg.total_steps:
                hist.write(format_history(step, "train", "loss", value))
                for key in ("reg", "ang", "io"):
                    hist.write(format_history(step, "train", f"loss_{key}", parts[key]))
                hist.flush()
                if log:
                    log(f"step {step} loss {value:.6f} lr {scheduled_lr(cfg, step):.3e}")
            if val_set is not None and (step % cfg.eval_every == 0 or step == cfg.total_steps):
                report = evaluate(model, val_set, n_slots, cfg.eval_batch_size)
                for name, v in report.rows():
                    hist.write(format_history(step, "val", name, v))
                hist.flush()
                if log:
                    log(f"step {step} val " + " ".join(f"{k}={v:.4f}" for k, v in report.rows()))
                score = float(np.float32(report.avg_dist))
                if score < best_val:
                    best_val = score
                    best_ckpt = checkpoint_save(out_dir / "best.ckpt", model, state, cfg, step, best_val)
            if step % cfg.checkpoint_every == 0 or step == cfg.total_steps:
                last_ckpt = checkpoint_save(out_dir / "last.ckpt", model, state, cfg, step, best_val)
    if stop_at is not None and step < cfg.total_steps:
        last_ckpt = checkpoint_save(out_dir / "last.ckpt", model, state, cfg, step, best_val)
    return TrainResult(model, step, best_val, history, last_ckpt, best_ckpt, report)
