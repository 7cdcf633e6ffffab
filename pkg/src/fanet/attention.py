"""Fastidious excitation and the heads that produce its parameters.

Fastidious excitation scales, per channel c, only the pixels of the feature
map that exceed a threshold ``g[c]`` by an activation ``s[c]``; every other
pixel passes through unchanged.  FSAM derives (s, g) from the map being
excited; FIAM derives one (s, g) pair per decoder level from the deepest
encoder map; the SE block is the thresholdless baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import functional as F
from .autograd import Parameter, Tensor, as_tensor
from .errors import ShapeError
from .functional import _sigmoid
from .nn import Conv2d, Module

GRAD_MODES = ("hard", "surrogate")
DEFAULT_TAU = 0.1


@dataclass
class ExcitationParams:
    """Per-sample activations ``s`` and thresholds ``g``, each [N, C] in (0, 1)."""

    s: Tensor
    g: Tensor

    @property
    def channels(self) -> int:
        return self.s.shape[1]


def fastidious_excite(x, params: ExcitationParams, grad_mode: str = "surrogate",
                      tau: float = DEFAULT_TAU) -> Tensor:
    """``out = s*x where x > g, else x``, per sample and channel.

    The forward pass is the same in both gradient modes.  ``"hard"``
    differentiates the literal piecewise map: the mask is a constant, so the
    threshold gets a zero gradient.  ``"surrogate"`` keeps the hard forward
    but differentiates ``x + (s - 1) * x * m`` with the soft mask
    ``m = sigmoid((x - g) / tau)``, which gives the threshold a gradient.
    """
    x = as_tensor(x)
    s, g = as_tensor(params.s), as_tensor(params.g)
    if grad_mode not in GRAD_MODES:
        raise ValueError(f"grad_mode must be one of {GRAD_MODES}, got {grad_mode!r}")
    if x.ndim != 4 or s.shape != x.shape[:2] or g.shape != x.shape[:2]:
        raise ShapeError(
            f"fastidious_excite: params s{s.shape}, g{g.shape} do not match feature map {x.shape}"
        )
    if grad_mode == "surrogate" and not tau > 0:
        raise ValueError(f"surrogate gradients need tau > 0, got {tau}")

    s4 = s.data[:, :, None, None]
    g4 = g.data[:, :, None, None]
    mask = x.data > g4
    out = np.where(mask, s4 * x.data, x.data)

    def backward(grad):
        if grad_mode == "hard":
            gx = grad * np.where(mask, s4, 1.0) if x.requires_grad else None
            gs = (grad * x.data * mask).sum(axis=(2, 3))
            return gx, gs, np.zeros_like(g.data)
        soft = _sigmoid((x.data - g4) / tau)
        dsoft = soft * (1.0 - soft) / tau
        gx = grad * (1.0 + (s4 - 1.0) * (soft + x.data * dsoft)) if x.requires_grad else None
        gs = (grad * x.data * soft).sum(axis=(2, 3))
        gg = -(grad * (s4 - 1.0) * x.data * dsoft).sum(axis=(2, 3))
        return gx, gs, gg

    return Tensor._make(out, (x, s, g), backward, "fastidious_excite")


def bottleneck_width(channels: int, r: int) -> int:
    return max(1, channels // r)


class FSAM(Module):
    """Fastidious self-attention: two bias-free bottleneck FC branches on the squeeze.

    ``s = sigmoid(W2s relu(W1s z))`` and ``g = sigmoid(W2g relu(W1g z))``
    with ``z`` the global average pool of the input.
    """

    def __init__(self, channels: int, r: int = 3, fc_bias: bool = False):
        super().__init__()
        self.channels, self.r = channels, r
        hidden = bottleneck_width(channels, r)
        self.hidden = hidden
        self.w1s = Parameter((hidden, channels), fan_in=channels)
        self.w2s = Parameter((channels, hidden), fan_in=hidden)
        self.w1g = Parameter((hidden, channels), fan_in=channels)
        self.w2g = Parameter((channels, hidden), fan_in=hidden)
        if fc_bias:
            self.b1s = Parameter((hidden,), init="zeros")
            self.b2s = Parameter((channels,), init="zeros")
            self.b1g = Parameter((hidden,), init="zeros")
            self.b2g = Parameter((channels,), init="zeros")
        self.fc_bias = fc_bias

    def squeeze(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"FSAM: expected {self.channels} channels, got input {x.shape}")
        return F.global_avg_pool(x)

    def _branch(self, z: Tensor, w1, w2, b1=None, b2=None) -> Tensor:
        return F.sigmoid(F.linear(F.relu(F.linear(z, w1, b1)), w2, b2))

    def forward(self, x: Tensor) -> ExcitationParams:
        z = self.squeeze(x)
        bias = lambda n: getattr(self, n) if self.fc_bias else None  # noqa: E731
        s = self._branch(z, self.w1s, self.w2s, bias("b1s"), bias("b2s"))
        g = self._branch(z, self.w1g, self.w2g, bias("b1g"), bias("b2g"))
        return ExcitationParams(s, g)


def fiam_conv_width(c0: int, factor: float = 1.2) -> int:
    # floor, with a guard against 1.2 * 5 = 5.999... style representation error
    return max(1, int(math.floor(c0 * factor + 1e-9)))


class FIAM(Module):
    """Fastidious inter-attention from the deepest encoder feature.

    A strided 3x3 conv (followed by ReLU) widens ``c0`` to ``floor(factor*c0)``
    channels, the result is squeezed to ``z0`` and fed through two chained,
    bias-free FC sequences.  At level n the pre-activation ``a = W_n z_{n-1}``
    is shared: ``sigmoid(a)`` is that level's (s or g) and ``relu(a)`` feeds
    level n+1.  Levels are ordered deepest decoder stage first.
    """

    def __init__(self, c0: int, level_dims: Sequence[int], factor: float = 1.2, fc_bias: bool = False):
        super().__init__()
        self.c0 = c0
        self.d0 = fiam_conv_width(c0, factor)
        self.level_dims = list(level_dims)
        # the bottleneck is tiny (S/16); floor semantics keep e.g. 18 -> 9
        self.conv = Conv2d(c0, self.d0, 3, stride=2, padding=1, bias=True, strict=False)
        dims = [self.d0] + self.level_dims
        for n in range(1, len(dims)):
            setattr(self, f"ws{n}", Parameter((dims[n], dims[n - 1]), fan_in=dims[n - 1]))
            setattr(self, f"wg{n}", Parameter((dims[n], dims[n - 1]), fan_in=dims[n - 1]))
            if fc_bias:
                setattr(self, f"bs{n}", Parameter((dims[n],), init="zeros"))
                setattr(self, f"bg{n}", Parameter((dims[n],), init="zeros"))
        self.fc_bias = fc_bias

    @property
    def levels(self) -> int:
        return len(self.level_dims)

    def squeeze(self, x0: Tensor) -> Tensor:
        if x0.ndim != 4 or x0.shape[1] != self.c0:
            raise ShapeError(f"FIAM: expected {self.c0} input channels, got {x0.shape}")
        return F.global_avg_pool(F.relu(self.conv(x0)))

    def forward(self, x0: Tensor) -> list[ExcitationParams]:
        z0 = self.squeeze(x0)
        zs = zg = z0
        out = []
        for n in range(1, self.levels + 1):
            bs = getattr(self, f"bs{n}") if self.fc_bias else None
            bg = getattr(self, f"bg{n}") if self.fc_bias else None
            a_s = F.linear(zs, getattr(self, f"ws{n}"), bs)
            a_g = F.linear(zg, getattr(self, f"wg{n}"), bg)
            out.append(ExcitationParams(F.sigmoid(a_s), F.sigmoid(a_g)))
            zs, zg = F.relu(a_s), F.relu(a_g)
        return out


class SEBlock(Module):
    """Squeeze-and-excitation: every pixel of channel c scaled by ``sigmoid(W2 relu(W1 z))[c]``."""

    def __init__(self, channels: int, r: int = 3, fc_bias: bool = False):
        super().__init__()
        self.channels = channels
        hidden = bottleneck_width(channels, r)
        self.w1 = Parameter((hidden, channels), fan_in=channels)
        self.w2 = Parameter((channels, hidden), fan_in=hidden)
        if fc_bias:
            self.b1 = Parameter((hidden,), init="zeros")
            self.b2 = Parameter((channels,), init="zeros")
        self.fc_bias = fc_bias

    def gate(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"SE: expected {self.channels} channels, got input {x.shape}")
        z = F.global_avg_pool(x)
        b1 = self.b1 if self.fc_bias else None
        b2 = self.b2 if self.fc_bias else None
        return F.sigmoid(F.linear(F.relu(F.linear(z, self.w1, b1)), self.w2, b2))

    def forward(self, x: Tensor) -> Tensor:
        return F.channel_scale(x, self.gate(x))
