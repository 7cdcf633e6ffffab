"""The U-Net building blocks: In-Conv, Down-Conv, Up-Conv, Merge-Conv, Out-Conv."""

from __future__ import annotations

from typing import Callable, Optional

from . import functional as F
from .autograd import Tensor
from .errors import ShapeError
from .nn import Conv2d, ConvBNReLU, Module

Hook = Optional[Callable[[Tensor], Tensor]]


class DoubleConv(Module):
    """Two successive conv3x3 -> BN -> ReLU stages, both at ``c_out`` width."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.stage1 = ConvBNReLU(c_in, c_out)
        self.stage2 = ConvBNReLU(c_out, c_out)

    def _check(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeError(f"{type(self).__name__}: expected {self.c_in} channels, got input {x.shape}")

    def forward(self, x: Tensor) -> Tensor:
        self._check(x)
        return self.stage2(self.stage1(x))


class InConv(DoubleConv):
    pass


class MergeConv(DoubleConv):
    """Double conv after skip concatenation with two excitation attachment points.

    ``mid_hook`` is applied to the feature after stage one and ``out_hook``
    to the output of stage two.
    """

    def forward(self, x: Tensor, mid_hook: Hook = None, out_hook: Hook = None) -> Tensor:
        self._check(x)
        mid = self.stage1(x)
        if mid_hook is not None:
            mid = mid_hook(mid)
        out = self.stage2(mid)
        if out_hook is not None:
            out = out_hook(out)
        return out


class DownConv(Module):
    """2x2 max pool then double conv."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = DoubleConv(c_in, c_out)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(F.maxpool2d(x))


class UpConv(Module):
    """Bilinear x2 upsampling then one conv3x3 -> BN -> ReLU."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.c_in = c_in
        self.conv = ConvBNReLU(c_in, c_out)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeError(f"UpConv: expected {self.c_in} channels, got input {x.shape}")
        return self.conv(F.upsample_bilinear(x, 2))


class OutConv(Module):
    """1x1 conv (with bias) to class logits; no normalisation or activation."""

    def __init__(self, c_in: int, num_classes: int):
        super().__init__()
        self.conv = Conv2d(c_in, num_classes, 1, bias=True)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


def skip_concat(decoder_feat: Tensor, encoder_feat: Tensor) -> Tensor:
    """Channel concatenation, decoder channels first then encoder channels."""
    if decoder_feat.shape[2:] != encoder_feat.shape[2:]:
        raise ShapeError(
            f"skip_concat: spatial extents differ, decoder {decoder_feat.shape} vs encoder {encoder_feat.shape}"
        )
    return F.concat_channels([decoder_feat, encoder_feat])
