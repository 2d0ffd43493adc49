"""Minimal parameter containers built on the primitives."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor


def parameter(shape, dtype=np.float64, fill: float = 0.0) -> Tensor:
    return Tensor(np.full(shape, fill, dtype=dtype), requires_grad=True)


class Module:
    """Attribute-registered parameters, buffers and submodules.

    Registration order follows attribute assignment order, so parameter
    names and iteration order are stable across runs.
    """

    def __init__(self):
        # weight name -> fan-in, consumed by Kaiming initialization
        self.fan_in: dict[str, int] = {}

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            if isinstance(value, np.ndarray) and name.startswith("running_"):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_modules(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True, dtype=np.float64):
        super().__init__()
        self.weight = parameter((d_in, d_out), dtype)
        self.fan_in["weight"] = d_in
        self.bias = parameter((d_out,), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        return ops.add(y, self.bias) if self.bias is not None else y


class Conv2d(Module):
    """3x3-style same-padded convolution, channels last, no bias."""

    def __init__(self, c_in: int, c_out: int, kernel=(3, 3), dtype=np.float64):
        super().__init__()
        self.weight = parameter((*kernel, c_in, c_out), dtype)
        self.fan_in["weight"] = kernel[0] * kernel[1] * c_in

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5, dtype=np.float64):
        super().__init__()
        self.gamma = parameter((channels,), dtype, 1.0)
        self.beta = parameter((channels,), dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ops.batch_norm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                                training, self.momentum, self.eps)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float64):
        super().__init__()
        self.gamma = parameter((dim,), dtype, 1.0)
        self.beta = parameter((dim,), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)
