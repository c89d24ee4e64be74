"""Token assembly and the pre-norm ViT encoder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import tensor as T
from .nn import MLP, LayerNorm, Linear, Module
from .tensor import ConfigurationError, Tensor


@dataclass
class TokenSequence:
    """[image tokens (N) | person tokens (Np) | global token (1)] along axis -2."""

    x: Tensor
    n_image: int
    n_persons: int

    @property
    def n_tokens(self) -> int:
        return self.n_image + self.n_persons + 1

    def person_rows(self) -> slice:
        return slice(self.n_image, self.n_image + self.n_persons)


def assemble(x_img: Tensor, x_g: Tensor, x_glo: Tensor) -> TokenSequence:
    """Concatenate image, person and global tokens.

    Inputs may carry a leading batch axis; ``x_glo`` is broadcast over it.
    """
    dims = {x_img.shape[-1], x_g.shape[-1], x_glo.shape[-1]}
    if len(dims) != 1:
        raise ConfigurationError(
            f"token dims differ: image {x_img.shape[-1]}, person {x_g.shape[-1]}, global {x_glo.shape[-1]}"
        )
    glo = x_glo.reshape(1, x_glo.shape[-1])
    if x_img.ndim == 3:
        B = x_img.shape[0]
        glo = T.mul(glo, np.ones((B, 1, 1), dtype=glo.dtype))
    x = T.concat([x_img, x_g, glo], axis=-2)
    return TokenSequence(x, x_img.shape[-2], x_g.shape[-2])


def mhsa(x: Tensor, w_qkv: Tensor, b_qkv: Tensor, w_out: Tensor, b_out: Tensor, heads: int,
         return_weights: bool = False):
    """Full (unmasked) multi-head self-attention over [..., N_t, D]."""
    D = x.shape[-1]
    if D % heads:
        raise ConfigurationError(f"token dim {D} is not divisible by {heads} heads")
    dh = D // heads
    lead = x.shape[:-2]
    n = x.shape[-2]
    qkv = T.linear(x, w_qkv, b_qkv).reshape(lead + (n, 3, heads, dh))
    nl = len(lead)
    qkv = qkv.transpose((nl + 1,) + tuple(range(nl)) + (nl + 2, nl, nl + 3))  # [3, ..., h, n, dh]
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.transpose(tuple(range(nl + 1)) + (nl + 2, nl + 1))) * (1.0 / np.sqrt(dh))
    attn = T.softmax(scores)
    ctx = attn @ v  # [..., h, n, dh]
    ctx = ctx.transpose(tuple(range(nl)) + (nl + 1, nl, nl + 2)).reshape(lead + (n, D))
    out = T.linear(ctx, w_out, b_out)
    if return_weights:
        return out, attn
    return out


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ConfigurationError(f"token dim {dim} is not divisible by {heads} heads")
        self.qkv = Linear(dim, 3 * dim, rng)
        self.out = Linear(dim, dim, rng)
        self.heads = heads

    def forward(self, x: Tensor, return_weights: bool = False):
        return mhsa(x, self.qkv.weight, self.qkv.bias, self.out.weight, self.out.bias, self.heads, return_weights)


class Block(Module):
    """x <- x + MHSA(LN(x)); x <- x + FFN(LN(x))."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ffn = MLP([dim, mlp_ratio * dim, dim], rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class Encoder(Module):
    def __init__(self, dim: int, depth: int, heads: int, rng: np.random.Generator):
        self.blocks = [Block(dim, heads, rng) for _ in range(depth)]

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def forward(self, x: Tensor, tap_layers: Iterable[int] = ()) -> tuple[Tensor, dict[int, Tensor]]:
        """Run all blocks; ``taps[l]`` is the state after block ``l`` (1-based)."""
        tap_layers = set(tap_layers)
        bad = [l for l in tap_layers if not 1 <= l <= self.depth]
        if bad:
            raise ConfigurationError(f"tap layers {sorted(bad)} outside 1..{self.depth}")
        taps = {}
        for i, block in enumerate(self.blocks, start=1):
            x = block(x)
            if i in tap_layers:
                taps[i] = x
        return x, taps


def encode(seq: TokenSequence, encoder: Encoder, tap_layers: Iterable[int] = ()) -> tuple[Tensor, dict[int, Tensor]]:
    return encoder(seq.x, tap_layers)
