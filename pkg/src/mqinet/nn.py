"""Minimal module containers and the small layers shared by every block."""

from __future__ import annotations

import math

import numpy as np

from . import ops
from .tensor import Parameter, Tensor


class Module:
    """Parameter container.

    Parameters and sub-modules are discovered from instance attributes in
    assignment order, which fixes the parameter order used by checkpoints.
    """

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def assign_names(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def astype(self, dtype):
        for p in self.parameters():
            p.astype(dtype)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> Parameter:
    bound = 1.0 / math.sqrt(fan_in)
    return Parameter(rng.uniform(-bound, bound, size=shape))


def zeros(shape) -> Parameter:
    return Parameter(np.zeros(shape))


class Conv3x3(Module):
    def __init__(self, rng, cin: int, cout: int, zero: bool = False):
        if zero:
            self.weight = zeros((cout, cin, 3, 3))
        else:
            self.weight = uniform_fan_in(rng, (cout, cin, 3, 3), cin * 9)
        self.bias = zeros((cout,))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias)


class DepthwiseConv(Module):
    """3x3 depthwise conv initialised as identity plus small noise."""

    def __init__(self, rng, channels: int, noise: float = 0.02):
        k = rng.normal(0.0, noise, size=(channels, 3, 3))
        k[:, 1, 1] += 1.0
        self.weight = Parameter(k)
        self.bias = zeros((channels,))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.depthwise_conv2d(x, self.weight, self.bias)


class Pointwise(Module):
    def __init__(self, rng, cin: int, cout: int):
        self.weight = uniform_fan_in(rng, (cout, cin), cin)
        self.bias = zeros((cout,))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.pointwise_conv2d(x, self.weight, self.bias)


class PixelMLP(Module):
    """Two pointwise layers with GELU between (cin -> hidden -> cout)."""

    def __init__(self, rng, cin: int, hidden: int, cout: int | None = None):
        self.fc1 = Pointwise(rng, cin, hidden)
        self.fc2 = Pointwise(rng, hidden, cin if cout is None else cout)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class ChannelMLP(Module):
    """Two dense layers with GELU between, acting on pooled (B,C) vectors."""

    def __init__(self, rng, channels: int):
        hidden = max(1, channels // 2)
        self.w1 = uniform_fan_in(rng, (hidden, channels), channels)
        self.b1 = zeros((hidden,))
        self.w2 = uniform_fan_in(rng, (channels, hidden), hidden)
        self.b2 = zeros((channels,))

    def __call__(self, v: Tensor) -> Tensor:
        return ops.linear(ops.gelu(ops.linear(v, self.w1, self.b1)), self.w2, self.b2)


def channel_gate(mlp: ChannelMLP, pooled: Tensor) -> Tensor:
    """sigmoid(MLP(pooled)) reshaped to (B,C,1,1) for channel broadcasting."""
    B, C = pooled.shape
    return ops.reshape(ops.sigmoid(mlp(pooled)), (B, C, 1, 1))
