"""Training configuration and its plain-text ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .decoders import ContractError
from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "point"
    n_persons: int = 6
    # model
    image_size: int = 224
    patch_size: int = 16
    dim: int = 768
    depth: int = 12
    heads: int = 12
    crop_size: int = 224
    backbone_channels: tuple[int, ...] = (32, 64, 128, 512)
    fusion_width: int = 256
    model_seed: int = 0
    # optimization
    base_lr: float = 3e-5
    lr_min: float = 1e-6
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    batch_size: int = 32
    total_steps: int = 10000
    warmup_steps: int = 200
    restart_period: int = 1000
    restart_mult: int = 2
    lambda_reg: float = 100.0
    lambda_ang: float = 3.0
    lambda_io: float = 1.0
    seed: int = 0
    hflip: int = 0  # 1: mirror each training scene left-right with probability 1/2
    # data and bookkeeping
    train_data: str = ""
    val_data: str = ""
    eval_every: int = 500
    eval_batch_size: int = 64
    log_every: int = 50
    checkpoint_every: int = 1000
    checkpoint_dir: str = "checkpoints"

    def __post_init__(self):
        if self.variant not in ("point", "heatmap"):
            raise ConfigError(f"variant must be 'point' or 'heatmap', got {self.variant!r}")
        if self.variant == "heatmap" and self.n_persons != 1:
            raise ContractError("the heatmap variant requires n_persons = 1")
        for name in ("n_persons", "batch_size", "total_steps", "restart_period", "restart_mult",
                     "eval_every", "log_every", "checkpoint_every", "eval_batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be nonnegative")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            variant=self.variant, image_size=self.image_size, patch_size=self.patch_size, dim=self.dim,
            depth=self.depth, heads=self.heads, n_persons=self.n_persons, crop_size=self.crop_size,
            backbone_channels=tuple(self.backbone_channels), fusion_width=self.fusion_width,
        )

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def desk_config(variant: str = "point", n_persons: int = 4, **overrides) -> TrainConfig:
    """Desk-scale defaults: 112x112 scenes, D=64, L=4, 4 heads, 32x32 head crops."""
    base = dict(
        variant=variant, n_persons=1 if variant == "heatmap" else n_persons, image_size=112, patch_size=16,
        dim=64, depth=4, heads=4, crop_size=32, fusion_width=64, base_lr=5e-4, batch_size=16,
        total_steps=3000, lambda_reg=1000.0 if variant == "heatmap" else 100.0, eval_every=500,
        checkpoint_every=1000, eval_batch_size=64,
    )
    base.update(overrides)
    return TrainConfig(**base)


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(kind, text: str, key: str):
    try:
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            return float(text)
        if kind in (str, "str"):
            return text
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{f.name} = {_format_value(getattr(cfg, f.name))}\n" for f in fields(cfg))


def parse_config(text: str) -> TrainConfig:
    """Parse ``key = value`` lines; '#' starts a comment line; unknown keys are rejected."""
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ConfigError(f"line {line_no}: expected 'key = value'")
        if key not in kinds:
            raise ConfigError(f"unknown config key: {key}")
        values[key] = _parse_value(kinds[key], value, key)
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"))
