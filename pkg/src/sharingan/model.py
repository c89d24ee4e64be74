"""The full gaze-following model: image tokens + person tokens -> encoder -> decoders."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .decoders import ContractError, DPTHeatmapDecoder, InOutHead, PointDecoder, heatmap_argmax
from .encoder import Encoder, assemble
from .nn import LayerNorm, Module
from .person import PersonModule
from .tensor import ConfigurationError, Tensor
from .tokens import ImageTokenizer, standardize

VARIANTS = ("point", "heatmap")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "point"
    image_size: int = 112
    patch_size: int = 16
    dim: int = 64
    depth: int = 4
    heads: int = 4
    n_persons: int = 4
    crop_size: int = 32
    backbone_channels: tuple[int, ...] = (32, 64, 128, 512)
    fusion_width: int = 64
    tap_layers: tuple[int, ...] = field(default=())
    channels: int = 3

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        if self.variant == "heatmap" and self.n_persons != 1:
            raise ContractError("the heatmap variant takes exactly one person token (n_persons = 1)")
        if self.image_size % self.patch_size:
            raise ConfigurationError("image size must be divisible by the patch size")
        if self.dim % self.heads:
            raise ConfigurationError("dim must be divisible by heads")
        if self.dim % 16:
            raise ConfigurationError("dim must be divisible by 16")
        if len(self.backbone_channels) != 4:
            raise ConfigurationError("the gaze backbone has exactly 4 conv blocks")
        if self.variant == "heatmap" and len(self.taps) != 4:
            raise ConfigurationError("the heatmap variant needs 4 tap layers")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_image_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def d_emb(self) -> int:
        return self.backbone_channels[-1]

    @property
    def taps(self) -> tuple[int, ...]:
        """Encoder layers feeding the heatmap decoder, shallow to deep (repeats allowed)."""
        if self.tap_layers:
            return tuple(sorted(self.tap_layers))
        L = self.depth
        return tuple(max(1, -(-L * k // 4)) for k in range(1, 5))


def full_scale(variant: str = "point", n_persons: int = 6) -> ModelConfig:
    """ViT-Base sized model on 224x224 images with 224x224 head crops."""
    return ModelConfig(variant=variant, image_size=224, patch_size=16, dim=768, depth=12, heads=12,
                       n_persons=1 if variant == "heatmap" else n_persons, crop_size=224,
                       backbone_channels=(32, 64, 128, 512), fusion_width=256)


def desk_scale(variant: str = "point", n_persons: int = 4) -> ModelConfig:
    return ModelConfig(variant=variant, n_persons=1 if variant == "heatmap" else n_persons)


def micro(variant: str = "point", n_persons: int = 2) -> ModelConfig:
    """Smallest configuration used by the gradient-check suite."""
    return ModelConfig(variant=variant, image_size=48, patch_size=16, dim=32, depth=2, heads=2,
                       n_persons=1 if variant == "heatmap" else n_persons, crop_size=16,
                       backbone_channels=(4, 4, 8, 8), fusion_width=8)


class Sharingan(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.tokenizer = ImageTokenizer(cfg.image_size, cfg.patch_size, cfg.channels, cfg.dim, rng)
        self.person = PersonModule(cfg.dim, cfg.backbone_channels, rng)
        self.global_token = T.parameter(rng.normal(0.0, 0.02, size=(1, cfg.dim)))
        self.encoder = Encoder(cfg.dim, cfg.depth, cfg.heads, rng)
        self.final_norm = LayerNorm(cfg.dim)  # ViT output norm; taps are taken before it
        if cfg.variant == "heatmap":
            self.heatmap_decoder = DPTHeatmapDecoder(cfg.dim, cfg.grid, rng, fusion_width=cfg.fusion_width)
        else:
            self.point_decoder = PointDecoder(cfg.dim, rng)
        self.inout_head = InOutHead(cfg.dim, rng)

    def forward(self, images, crops, bboxes) -> dict:
        """images [B, H, W, C], crops [B, Np, h, w, C] (standardized), bboxes [B, Np, 4].

        The number of person slots may differ from ``cfg.n_persons`` in the
        point variant; the heatmap variant requires exactly one.
        """
        cfg = self.cfg
        images, crops, bboxes = (T.as_tensor(a) for a in (images, crops, bboxes))
        n_persons = crops.shape[1]
        if cfg.variant == "heatmap" and n_persons != 1:
            raise ContractError(f"the heatmap variant takes one person per forward pass, got {n_persons}")
        x_img = self.tokenizer(images)
        person = self.person(crops, bboxes)
        seq = assemble(x_img, person["x_g"], self.global_token)
        taps_wanted = cfg.taps if cfg.variant == "heatmap" else ()
        x_out, taps = self.encoder(seq.x, taps_wanted)
        x_out = self.final_norm(x_out)
        x_person = x_out[:, seq.person_rows(), :]
        out = {
            "x_img": x_img,
            "x_g": person["x_g"],
            "x_out": x_out,
            "x_person": x_person,
            "gaze_vec": person["gaze_vec"],
            "gaze_degenerate": person["gaze_degenerate"],
            "inout": self.inout_head(x_person, person["x_g"]),
            "n_image": seq.n_image,
        }
        if cfg.variant == "heatmap":
            out["heatmap"] = self.heatmap_decoder([taps[l] for l in cfg.taps], seq.n_image, n_persons)
        else:
            out["point"] = self.point_decoder(x_person)
        return out

    def predict(self, images, crops, bboxes) -> dict:
        """No-grad forward returning numpy arrays; ``point`` is the argmax cell in heatmap mode."""
        with T.no_grad():
            out = self.forward(images, crops, bboxes)
        res = {
            "inout": out["inout"].data,
            "gaze_vec": out["gaze_vec"].data,
        }
        if self.cfg.variant == "heatmap":
            res["heatmap"] = out["heatmap"].data
            res["point"] = heatmap_argmax(out["heatmap"].data)[:, None, :]
        else:
            res["point"] = out["point"].data
        return res


def prepare_inputs(images: np.ndarray, crops: np.ndarray, bboxes: np.ndarray, dtype=None):
    """Standardize raw pixel arrays and cast boxes to the working dtype."""
    dtype = dtype or T.get_default_dtype()
    return (
        Tensor(standardize(images, dtype=dtype)),
        Tensor(standardize(crops, dtype=dtype)),
        Tensor(np.asarray(bboxes, dtype=dtype)),
    )


def with_variant(cfg: ModelConfig, variant: str) -> ModelConfig:
    return replace(cfg, variant=variant, n_persons=1 if variant == "heatmap" else cfg.n_persons)
