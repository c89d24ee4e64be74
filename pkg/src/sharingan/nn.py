"""Minimal parameter containers built on :mod:`sharingan.tensor`."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Base class: parameters are Tensor attributes with ``requires_grad``;
    submodules are Module attributes or lists of Modules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        unknown = set(state) - set(params)
        if unknown:
            raise KeyError(f"unknown parameter(s): {sorted(unknown)}")
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameter(s): {sorted(missing)}")
        for name, arr in state.items():
            p = params[name]
            if tuple(arr.shape) != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = np.array(arr, dtype=p.dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to_dtype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """Affine map; Xavier-uniform weights unless ``std`` asks for a plain normal init."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, std: float | None = None, bias: bool = True):
        if std is None:
            limit = np.sqrt(6.0 / (d_in + d_out))
            w = rng.uniform(-limit, limit, size=(d_out, d_in))
        else:
            w = rng.normal(0.0, std, size=(d_out, d_in))
        self.weight = T.parameter(w)
        self.bias = T.parameter(np.zeros(d_out)) if bias else None

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    """3x3/1x1 convolution with N(0, gain^2 / fan_in) weights; the default gain is He-normal."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = True, gain: float = np.sqrt(2.0)):
        fan_in = c_in * kernel * kernel
        self.weight = T.parameter(rng.normal(0.0, gain / np.sqrt(fan_in), size=(c_out, c_in, kernel, kernel)))
        self.bias = T.parameter(np.zeros(c_out)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.gamma = T.parameter(np.ones(dim))
        self.beta = T.parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    """Stack of Linear layers with GELU between them (none after the last)."""

    def __init__(self, widths: Sequence[int], rng: np.random.Generator, std: float | None = None):
        if len(widths) < 2:
            raise T.ConfigurationError("MLP needs at least input and output widths")
        self.layers = [Linear(a, b, rng, std=std) for a, b in zip(widths[:-1], widths[1:])]

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.gelu(x)
        return x
