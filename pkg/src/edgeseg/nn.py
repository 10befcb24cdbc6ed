"""Parameter containers and the handful of layers the model is built from."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .numerics import Tensor, default_dtype
from .numerics import functional as F


class Parameter(Tensor):
    def __init__(self, data):
        super().__init__(np.array(data, dtype=default_dtype()), requires_grad=True)


class Module:
    """Tree of parameters addressed by stable dotted names."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {', '.join(missing[:5])}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """Acts on the last axis. Weight stored as ``in x out``."""

    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, bias: bool = True, zero: bool = False):
        bound = 1.0 / math.sqrt(n_in)
        self.weight = Parameter(np.zeros((n_in, n_out)) if zero else _uniform(rng, bound, (n_in, n_out)))
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, k: int, stride: int = 1, pad: int = 0,
                 bias: bool = True, gain: float = 1.0):
        fan_in = c_in * k * k
        bound = gain * math.sqrt(3.0 / fan_in)
        self.weight = Parameter(_uniform(rng, bound, (c_out, c_in, k, k)))
        self.bias = Parameter(np.zeros(c_out)) if bias else None
        self.stride, self.pad = stride, pad

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias, self.eps)


def to_tokens(x: Tensor) -> Tensor:
    """``N x C x H x W`` -> ``N x (H*W) x C``."""
    n, c, h, w = x.shape
    return F.transpose(F.reshape(x, (n, c, h * w)), (0, 2, 1))


def to_map(x: Tensor, h: int, w: int) -> Tensor:
    """``N x (H*W) x C`` -> ``N x C x H x W``."""
    n, t, c = x.shape
    if t != h * w:
        raise ValueError(f"{t} tokens cannot form a {h}x{w} grid")
    return F.reshape(F.transpose(x, (0, 2, 1)), (n, c, h, w))
