"""Command-line entry point: gen-data, train, eval, infer, gradcheck."""

from __future__ import annotations

import argparse
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from .config import ConfigError, format_config, load_config
from .data import GenerationError, ToySceneSpec, crop_head, load_image, read_dataset, resize_image, to_uint8, write_toy_dataset
from .decoders import ContractError
from .tensor import ConfigurationError
from .training import TrainingError


class CLIError(Exception):
    pass


def parse_box(text: str, arg: str = "--boxes") -> tuple[float, float, float, float]:
    parts = text.strip().split(",")
    try:
        box = tuple(float(v) for v in parts)
    except ValueError:
        raise CLIError(f"{arg}: malformed box {text!r}") from None
    if len(box) != 4:
        raise CLIError(f"{arg}: box {text!r} needs 4 comma-separated values")
    x0, y0, x1, y1 = box
    if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
        raise CLIError(f"{arg}: box {text!r} must satisfy 0 <= min < max <= 1")
    return box


def parse_boxes(spec: str | None, path: str | None) -> list[tuple[float, float, float, float]]:
    """Inline boxes are separated by ';' or whitespace; a box file holds one box per line."""
    if path:
        p = Path(path)
        if not p.is_file():
            raise CLIError(f"--boxes-file: no such file {path}")
        lines = [ln.strip() for ln in p.read_text().splitlines()]
        return [parse_box(ln, "--boxes-file") for ln in lines if ln and not ln.startswith("#")]
    if not spec:
        return []
    return [parse_box(t) for t in spec.replace(";", " ").split()]


def _set_threads(n: int | None):
    from threadpoolctl import threadpool_limits

    if n is None and os.environ.get("SHARINGAN_THREADS"):
        n = int(os.environ["SHARINGAN_THREADS"])
    return threadpool_limits(n) if n else None


def cmd_gen_data(args) -> int:
    spec = ToySceneSpec(image_size=args.image_size, n_persons=args.n_persons, n_objects=args.n_objects,
                        crop_size=args.crop_size, n_annotators=args.n_annotators)
    write_toy_dataset(args.out, args.seed, args.n_scenes, spec)
    print(f"wrote {args.n_scenes} scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .training import train

    cfg = load_config(args.config)
    if args.checkpoint_dir:
        cfg = cfg.replace(checkpoint_dir=args.checkpoint_dir)
    cfg.model_config()
    sys.stdout.write(format_config(cfg))
    sys.stdout.flush()
    if not cfg.train_data:
        raise CLIError("config key train_data is empty")
    tr = read_dataset(cfg.train_data, cfg.image_size, cfg.crop_size)
    va = read_dataset(cfg.val_data, cfg.image_size, cfg.crop_size) if cfg.val_data else None
    res = train(cfg, tr, va, resume=args.resume, log=print)
    print(f"finished at step {res.step}; best val avg_dist {res.best_val:.6f}")
    return 0


def cmd_eval(args) -> int:
    from .training import evaluate, evaluate_np, load_model

    model, ckpt = load_model(args.checkpoint)
    cfg = ckpt.config
    data = read_dataset(args.data, cfg.image_size, cfg.crop_size)
    if not args.np:
        sys.stdout.write(evaluate(model, data, cfg.n_persons, cfg.eval_batch_size).format())
        return 0
    if cfg.variant == "heatmap" and any(k != 1 for k in args.np):
        raise ContractError("heatmap checkpoints evaluate one person per pass (--np 1)")
    for k in args.np:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            report = evaluate_np(model, data, k, cfg.eval_batch_size)
        sys.stdout.write(f"# n_persons={k}\n" + report.format())
    return 0


def cmd_infer(args) -> int:
    from .training import load_model
    from .model import prepare_inputs

    boxes = parse_boxes(args.boxes, args.boxes_file)
    if not boxes:
        return 0
    model, ckpt = load_model(args.checkpoint)
    cfg = ckpt.config
    path = Path(args.image)
    if not path.is_file():
        raise CLIError(f"--image: no such file {args.image}")
    img = load_image(path)
    if img.shape[:2] != (cfg.image_size, cfg.image_size):
        img = to_uint8(resize_image(img, cfg.image_size))
    crops = np.stack([to_uint8(crop_head(img, b, cfg.crop_size)) for b in boxes])
    lines, maps = [], []
    # the heatmap variant is single-person, so it takes one pass per box
    groups = [list(range(len(boxes)))] if cfg.variant == "point" else [[i] for i in range(len(boxes))]
    for group in groups:
        res = model.predict(*prepare_inputs(img[None], crops[group][None], np.array([boxes[i] for i in group])[None]))
        for j, i in enumerate(group):
            x, y = res["point"][0, j]
            gx, gy = res["gaze_vec"][0, j]
            lines.append(f"{i}\t{x:.6f}\t{y:.6f}\t{res['inout'][0, j]:.6f}\t{gx:.6f}\t{gy:.6f}\n")
            if "heatmap" in res:
                maps.append(res["heatmap"][0])
    sys.stdout.write("".join(lines))
    if args.heatmap_out:
        if cfg.variant != "heatmap":
            raise CLIError("--heatmap-out needs a heatmap-variant checkpoint")
        with open(args.heatmap_out, "w") as fh:
            for i, hm in enumerate(maps):
                fh.write(f"# person {i}\n")
                fh.writelines("\t".join(f"{v:.6f}" for v in row) + "\n" for row in hm)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import model_grad_check

    ok = True
    for variant in ("point", "heatmap"):
        report = model_grad_check(args.scale, variant, tol=args.tol, max_entries=args.max_entries, seed=args.seed)
        print(f"# {args.scale} {variant}")
        print(report.format())
        ok &= report.passed
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sharingan", description=__doc__)
    ap.add_argument("--threads", type=int, default=None, help="BLAS threads (1 = fully deterministic)")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a procedurally generated toy gaze dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--n-scenes", type=int, default=100)
    g.add_argument("--n-persons", type=int, default=4)
    g.add_argument("--n-objects", type=int, default=3)
    g.add_argument("--n-annotators", type=int, default=1)
    g.add_argument("--image-size", type=int, default=112)
    g.add_argument("--crop-size", type=int, default=32)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train from a key = value config file")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", default=None, help="checkpoint to resume from")
    t.add_argument("--checkpoint-dir", default=None, help="override checkpoint_dir")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="metric report for a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--np", type=int, nargs="*", default=None,
                   help="evaluation-time person counts; one report per value")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="predict gaze for the given head boxes")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--boxes", default=None, help="x_min,y_min,x_max,y_max per person, ';'-separated")
    i.add_argument("--boxes-file", default=None)
    i.add_argument("--heatmap-out", default=None, help="write 64x64 score grids as text")
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    c.add_argument("--scale", choices=["micro"], default="micro")
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--max-entries", type=int, default=24)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        limiter = _set_threads(args.threads)
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except (CLIError, ConfigError, ConfigurationError, ContractError, GenerationError, TrainingError,
            FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
