"""Module tree, parameter registry and the basic layers."""

from __future__ import annotations

import zlib
from typing import Iterator

import numpy as np

from . import functional as F
from .autograd import Parameter, Tensor, default_dtype


class Module:
    """Container that registers child modules, parameters and buffers by attribute.

    Registration order is attribute assignment order, so parameter names and
    their iteration order are deterministic.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, array: np.ndarray) -> None:
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, m in self._modules.items():
            yield from m.named_modules(prefix + name + ".")

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def assign_names(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def initialize(self, seed: int = 0) -> None:
        """Fill every parameter from a stream keyed on (seed, parameter name).

        Keying on the name means two models sharing a parameter path get the
        same initial values, whatever else they contain.
        """
        self.assign_names()
        for name, p in self.named_parameters():
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            if p.init == "zeros":
                p.data[...] = 0
            elif p.init == "ones":
                p.data[...] = 1
            else:
                # Kaiming-uniform, fan-in mode, ReLU gain
                bound = np.sqrt(6.0 / p.fan_in)
                p.data[...] = rng.uniform(-bound, bound, size=p.shape)

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def astype(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, m in self.named_modules():
            for name, b in list(m._buffers.items()):
                m.register_buffer(name, b.astype(dtype))
            if isinstance(m, BatchNorm2d):
                m.state.running_mean = m.running_mean
                m.state.running_var = m.running_var
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1, padding: int = 0,
                 bias: bool = True, strict: bool = True):
        super().__init__()
        self.stride, self.padding, self.strict = stride, padding, strict
        self.weight = Parameter((c_out, c_in, k, k), init="kaiming", fan_in=c_in * k * k)
        self.bias = Parameter((c_out,), init="zeros") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.strict)


class BatchNorm2d(Module):
    def __init__(self, channels: int):
        super().__init__()
        self.gamma = Parameter((channels,), init="ones")
        self.beta = Parameter((channels,), init="zeros")
        self.state = F.BatchNormState(channels, default_dtype())
        self.register_buffer("running_mean", self.state.running_mean)
        self.register_buffer("running_var", self.state.running_var)

    def forward(self, x: Tensor) -> Tensor:
        return F.batchnorm2d(x, self.gamma, self.beta, self.state, self.training)


class ConvBNReLU(Module):
    """3x3 conv (pad 1, stride 1, no bias) -> batch norm -> ReLU."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, 3, padding=1, bias=False)
        self.bn = BatchNorm2d(c_out)

    def forward(self, x: Tensor) -> Tensor:
        return F.relu(self.bn(self.conv(x)))
