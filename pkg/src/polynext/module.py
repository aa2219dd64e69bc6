"""Minimal parameter container used by every block."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor, linear, conv2d, param


class Module:
    """Attribute-walking container.

    Trainable parameters are ``Tensor`` attributes with ``requires_grad``;
    buffers (running statistics) are plain ``np.ndarray`` attributes. Lists of
    modules are traversed with their index as the name component. Traversal
    follows attribute assignment order, so names are stable across builds.
    """

    def _children(self) -> Iterator[tuple[str, object]]:
        yield from vars(self).items()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, np.ndarray):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def set_buffer(self, dotted: str, value: np.ndarray) -> None:
        *path, leaf = dotted.split(".")
        obj = self
        for part in path:
            obj = obj[int(part)] if isinstance(obj, (list, tuple)) else getattr(obj, part)
        current = getattr(obj, leaf)
        if not isinstance(current, np.ndarray) or current.shape != value.shape:
            raise KeyError(f"no buffer {dotted!r} with shape {np.shape(value)}")
        setattr(obj, leaf, np.array(value, dtype=np.float64))


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int, gain: float) -> np.ndarray:
    return rng.standard_normal(shape) * (gain / np.sqrt(fan_in))


class Linear(Module):
    """Projection of the feature axis (axis 1); a 1x1 convolution on maps."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, gain: float = 1.0,
                 bias: bool = True):
        self.weight = param(kaiming_normal(rng, (d_out, d_in), d_in, gain))
        self.bias = param(np.zeros(d_out)) if bias else None

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, *,
                 stride: int = 1, padding: int = 0, dilation: int = 1, groups: int = 1,
                 gain: float = 1.0, bias: bool = True):
        fan_in = (c_in // groups) * kernel * kernel
        self.weight = param(kaiming_normal(rng, (c_out, c_in // groups, kernel, kernel), fan_in, gain))
        self.bias = param(np.zeros(c_out)) if bias else None
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        self.groups = groups

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation, self.groups)


def depthwise(channels: int, kernel: int, rng: np.random.Generator, *, dilation: int = 1,
              gain: float = 1.0) -> Conv2d:
    """Padding-preserving depthwise convolution (odd kernel)."""
    return Conv2d(channels, channels, kernel, rng, padding=dilation * (kernel - 1) // 2,
                  dilation=dilation, groups=channels, gain=gain)


class Identity(Module):
    def __call__(self, x: Tensor, mode: str = "infer", **_) -> Tensor:
        return x
