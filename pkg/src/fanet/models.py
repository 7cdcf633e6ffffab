"""U-Net and the FANet family (U-Net-SE, FANet-S, FANet-I, FANet)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from functools import partial
from typing import Any

import numpy as np

from .attention import DEFAULT_TAU, FIAM, FSAM, GRAD_MODES, SEBlock, fastidious_excite
from .autograd import Tensor, precision
from .blocks import DownConv, InConv, MergeConv, OutConv, UpConv, skip_concat
from .errors import ConfigError, ShapeError
from .nn import Module

VARIANTS = ("unet", "unet-se", "fanet-s", "fanet-i", "fanet")

DISPLAY_NAMES = {
    "unet-se": "U-Net-SE",
    "unet": "U-Net",
    "fanet-i": "FANet-I",
    "fanet-s": "FANet-S",
    "fanet": "FANet",
}

# (FIAM, FSAM) presence; the SE replacement counts as neither
ATTENTION_FLAGS = {
    "unet-se": (False, False),
    "unet": (False, False),
    "fanet-i": (True, False),
    "fanet-s": (False, True),
    "fanet": (True, True),
}

DEPTH = 4


@dataclass
class ArchitectureSpec:
    variant: str = "fanet"
    base_width: int = 64
    depth: int = DEPTH
    num_classes: int = 5
    input_size: int = 288
    fsam_r: int = 3
    fiam_factor: float = 1.2
    grad_mode: str = "surrogate"
    tau: float = DEFAULT_TAU
    fc_bias: bool = False

    @classmethod
    def desk(cls, variant: str = "fanet", **overrides) -> "ArchitectureSpec":
        return cls(variant=variant, base_width=8, input_size=96, **overrides)

    def validate(self) -> "ArchitectureSpec":
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        if self.depth != DEPTH:
            raise ConfigError(f"depth is fixed at {DEPTH}, got {self.depth}")
        if self.base_width < 1 or self.num_classes < 2 or self.fsam_r < 1:
            raise ConfigError(f"invalid widths in {self}")
        if self.input_size < 2 ** self.depth or self.input_size % 2 ** self.depth:
            raise ConfigError(f"input_size {self.input_size} must be a positive multiple of {2 ** self.depth}")
        if self.grad_mode not in GRAD_MODES:
            raise ConfigError(f"grad_mode must be one of {GRAD_MODES}, got {self.grad_mode!r}")
        if self.grad_mode == "surrogate" and not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        return self

    @property
    def encoder_widths(self) -> list[int]:
        return [self.base_width * 2 ** i for i in range(self.depth + 1)]

    @property
    def decoder_widths(self) -> list[int]:
        """Merge-Conv widths, deepest first."""
        return [self.base_width * 2 ** (self.depth - n) for n in range(1, self.depth + 1)]

    @property
    def has_fiam(self) -> bool:
        return ATTENTION_FLAGS[self.variant][0]

    @property
    def has_fsam(self) -> bool:
        return ATTENTION_FLAGS[self.variant][1]

    @property
    def has_se(self) -> bool:
        return self.variant == "unet-se"

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ArchitectureSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown architecture fields: {', '.join(sorted(unknown))}")
        return cls(**data).validate()


def fiam_site(n: int, width: int) -> str:
    return f"Merge-Conv{n}_{width}"


def fsam_site(n: int, width: int) -> str:
    return f"FSAM{n}_{width}"


def se_site(n: int, width: int) -> str:
    return f"SE{n}_{width}"


class SegmentationNet(Module):
    """Encoder-decoder with optional excitation at each Merge-Conv.

    FIAM-driven excitation (if present) acts on the Merge-Conv intermediate
    feature, FSAM excitation (or the SE block) on its output.  Set
    ``excitation_enabled = False`` to run the bare backbone on the same
    weights.  When ``recorder`` is a dict, every excitation site stores its
    input, output, s and g arrays there under its site name.
    """

    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        spec.validate()
        object.__setattr__(self, "spec", spec)
        object.__setattr__(self, "excitation_enabled", True)
        object.__setattr__(self, "recorder", None)
        enc = spec.encoder_widths
        dec = spec.decoder_widths
        self.inc = InConv(3, enc[0])
        for i in range(1, spec.depth + 1):
            setattr(self, f"down{i}", DownConv(enc[i - 1], enc[i]))
        prev = enc[-1]
        for n, width in enumerate(dec, start=1):
            setattr(self, f"up{n}", UpConv(prev, width))
            skip_width = enc[spec.depth - n]
            setattr(self, f"merge{n}", MergeConv(width + skip_width, width))
            prev = width
        self.outc = OutConv(dec[-1], spec.num_classes)
        if spec.has_fiam:
            self.fiam = FIAM(enc[-1], dec, spec.fiam_factor, spec.fc_bias)
        if spec.has_fsam:
            for n, width in enumerate(dec, start=1):
                setattr(self, f"fsam{n}", FSAM(width, spec.fsam_r, spec.fc_bias))
        if spec.has_se:
            for n, width in enumerate(dec, start=1):
                setattr(self, f"se{n}", SEBlock(width, spec.fsam_r, spec.fc_bias))
        self.assign_names()

    # -- introspection ---------------------------------------------------
    def attention_sites(self) -> list[str]:
        """Names of fastidious excitation sites (FIAM levels then FSAMs)."""
        dec = self.spec.decoder_widths
        sites = []
        if self.spec.has_fiam:
            sites += [fiam_site(n, w) for n, w in enumerate(dec, start=1)]
        if self.spec.has_fsam:
            sites += [fsam_site(n, w) for n, w in enumerate(dec, start=1)]
        return sites

    def attention_modules(self) -> dict[str, list[str]]:
        """Attention module instances and the excitation sites each drives."""
        dec = self.spec.decoder_widths
        out: dict[str, list[str]] = {}
        if self.spec.has_fiam:
            out["FIAM"] = [fiam_site(n, w) for n, w in enumerate(dec, start=1)]
        if self.spec.has_fsam:
            for n, w in enumerate(dec, start=1):
                out[fsam_site(n, w)] = [fsam_site(n, w)]
        return out

    def threshold_parameters(self) -> list[str]:
        """Names of the parameters on the threshold (g) branches."""
        return [name for name, _ in self.named_parameters()
                if (name.startswith("fsam") and name.split(".")[-1] in ("w1g", "w2g", "b1g", "b2g"))
                or (name.startswith("fiam.") and name.split(".")[-1][:2] in ("wg", "bg"))]

    # -- forward ---------------------------------------------------------
    def _excite(self, site: str, params, x: Tensor) -> Tensor:
        out = fastidious_excite(x, params, self.spec.grad_mode, self.spec.tau)
        if self.recorder is not None:
            self.recorder[site] = {
                "input": x.data.copy(), "output": out.data.copy(),
                "s": params.s.data.copy(), "g": params.g.data.copy(),
            }
        return out

    def _fsam_excite(self, n: int, site: str, x: Tensor) -> Tensor:
        return self._excite(site, getattr(self, f"fsam{n}")(x), x)

    def _se_excite(self, n: int, site: str, x: Tensor) -> Tensor:
        block = getattr(self, f"se{n}")
        gate = block.gate(x)
        from . import functional as F
        out = F.channel_scale(x, gate)
        if self.recorder is not None:
            self.recorder[site] = {"input": x.data.copy(), "output": out.data.copy(), "s": gate.data.copy()}
        return out

    def forward(self, images) -> Tensor:
        spec = self.spec
        images = images if isinstance(images, Tensor) else Tensor(images)
        expected = (3, spec.input_size, spec.input_size)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise ShapeError(f"model expects input (N, {', '.join(map(str, expected))}), got {images.shape}")

        feats = [self.inc(images)]
        for i in range(1, spec.depth + 1):
            feats.append(getattr(self, f"down{i}")(feats[-1]))
        x = feats[-1]
        active = self.excitation_enabled
        fiam_params = self.fiam(x) if spec.has_fiam and active else None

        dec = spec.decoder_widths
        for n, width in enumerate(dec, start=1):
            x = getattr(self, f"up{n}")(x)
            x = skip_concat(x, feats[spec.depth - n])
            mid_hook = out_hook = None
            if active and fiam_params is not None:
                mid_hook = partial(self._excite, fiam_site(n, width), fiam_params[n - 1])
            if active and spec.has_fsam:
                out_hook = partial(self._fsam_excite, n, fsam_site(n, width))
            elif active and spec.has_se:
                out_hook = partial(self._se_excite, n, se_site(n, width))
            x = getattr(self, f"merge{n}")(x, mid_hook, out_hook)
        return self.outc(x)

    def predict(self, images) -> np.ndarray:
        """Arg-max class map [N, H, W] in eval mode without graph recording."""
        from .autograd import no_grad
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                logits = self.forward(images)
        finally:
            self.train(was_training)
        return logits.data.argmax(axis=1)


def build(spec: ArchitectureSpec, seed: int = 0, dtype: str = "single") -> SegmentationNet:
    """Construct and initialise a model for ``spec``.

    Initial values depend only on (seed, parameter name), so the backbone of
    every variant starts identical for a given seed.
    """
    spec.validate()
    with precision(dtype):
        model = SegmentationNet(spec)
        model.initialize(seed)
    return model


def param_count(model: Module) -> int:
    return model.param_count()
