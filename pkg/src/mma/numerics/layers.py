"""Parameter containers and the standard layers built on the primitives."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from mma.numerics import functional as F
from mma.numerics.tensor import Parameter, Tensor, get_default_dtype


class Module:
    """Walks attributes in definition order to enumerate parameters by dotted name."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            yield from _walk(value, prefix + name)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _walk(value, name: str) -> Iterator[tuple[str, Parameter]]:
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled outside two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _param(values: np.ndarray, dtype=None) -> Parameter:
    return Parameter(values, dtype=dtype or get_default_dtype())


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True, std: float = 0.02):
        self.weight = _param(trunc_normal(rng, (d_out, d_in), std))
        self.bias = _param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    """3x3 (or any odd-kernel) same-size convolution."""

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, kernel: int = 3, bias: bool = True):
        fan_in = c_in * kernel * kernel
        self.weight = _param(kaiming_uniform(rng, (c_out, c_in, kernel, kernel), fan_in))
        self.bias = _param(kaiming_uniform(rng, (c_out,), fan_in)) if bias else None
        self.padding = kernel // 2
        self.pad_mode = "zeros"

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, padding=self.padding, pad_mode=self.pad_mode)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = _param(np.ones(dim))
        self.bias = _param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return F.layernorm(x, self.weight, self.bias, self.eps)
