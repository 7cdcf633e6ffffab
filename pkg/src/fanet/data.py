"""Segmentation samples: synthetic orange generator, VOC-style I/O and augmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, LabelError, PairingError, ShapeError

NUM_CLASSES = 5

# background black; blossom end light blue; stem end green; flaw dark blue; ulcer grey
DEFAULT_PALETTE: dict[int, tuple[int, int, int]] = {
    0: (0, 0, 0),
    1: (102, 204, 255),
    2: (0, 176, 80),
    3: (0, 32, 160),
    4: (128, 128, 128),
}

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass
class SegmentationSample:
    image: np.ndarray  # H x W x 3 float in [0, 1]
    mask: np.ndarray  # H x W int class ids
    id: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ShapeError(f"sample {self.id!r}: image must be H x W x 3, got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise ShapeError(f"sample {self.id!r}: mask {self.mask.shape} vs image {self.image.shape}")

    @property
    def size(self) -> tuple[int, int]:
        return self.mask.shape


def to_batch(samples: Sequence[SegmentationSample], dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Stack samples into images [N, 3, H, W] and masks [N, H, W]."""
    images = np.stack([s.image.transpose(2, 0, 1) for s in samples]).astype(dtype)
    masks = np.stack([s.mask for s in samples]).astype(np.int64)
    return images, masks


# -- synthetic oranges ---------------------------------------------------

def _polar_blob(rr, cc, cy, cx, radius, rng, harmonics=(2, 3, 4), amp=0.2):
    """Star-shaped irregular region: r(theta) = radius * (1 + sum a_k cos(k theta + phi_k))."""
    theta = np.arctan2(rr - cy, cc - cx)
    dist = np.hypot(rr - cy, cc - cx)
    edge = np.ones_like(theta)
    for k in harmonics:
        edge += rng.uniform(0, amp) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
    return dist <= radius * edge


def _smooth_noise(rng, shape, sigma):
    return ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")


def _point_in_disk(rng, cy, cx, max_r):
    rho = max_r * math.sqrt(rng.uniform())
    phi = rng.uniform(0, 2 * math.pi)
    return cy + rho * math.sin(phi), cx + rho * math.cos(phi)


def synth_orange_sample(seed: int, index: int, size: int = 96) -> SegmentationSample:
    """One synthetic orange; deterministic in (seed, index, size)."""
    rng = np.random.default_rng([seed, index])
    s = float(size)
    rr, cc = np.mgrid[0:size, 0:size].astype(np.float64)

    image = 0.04 + 0.02 * _smooth_noise(rng, (size, size, 3), 2.0)
    mask = np.zeros((size, size), dtype=np.int64)

    cy, cx = s / 2 + rng.uniform(-0.05, 0.05) * s, s / 2 + rng.uniform(-0.05, 0.05) * s
    radius = rng.uniform(0.36, 0.42) * s
    dist = np.hypot(rr - cy, cc - cx)
    fruit = dist <= radius
    shade = 0.7 + 0.3 * np.sqrt(np.clip(1 - (dist / radius) ** 2, 0, 1))
    peel = np.array([0.95, 0.55, 0.12]) * rng.uniform(0.9, 1.05)
    texture = 1 + 0.05 * _smooth_noise(rng, (size, size), 0.8)
    fruit_rgb = peel[None, None, :] * (shade * texture)[..., None]
    image[fruit] = fruit_rgb[fruit]

    # exactly one pole per image: blossom end (1) or stem end (2)
    pole = 1 if rng.uniform() < 0.5 else 2
    py, px = _point_in_disk(rng, cy, cx, 0.45 * radius)
    if pole == 1:
        pr = rng.uniform(0.10, 0.13) * s
        region = np.hypot(rr - py, cc - px) <= pr
        inner = np.hypot(rr - py, cc - px) <= 0.55 * pr
        image[region] = [0.62, 0.36, 0.10]
        image[inner] = [1.0, 0.85, 0.5]
    else:
        pr = rng.uniform(0.09, 0.11) * s
        theta = np.arctan2(rr - py, cc - px)
        region = np.hypot(rr - py, cc - px) <= pr * (1 + 0.4 * np.cos(5 * theta + rng.uniform(0, 2 * np.pi)))
        image[region] = [0.35, 0.5, 0.12]
    mask[region & fruit] = pole

    # flaws: low contrast, irregular
    for _ in range(rng.integers(0, 4)):
        fy, fx = _point_in_disk(rng, cy, cx, 0.8 * radius)
        blob = _polar_blob(rr, cc, fy, fx, rng.uniform(0.06, 0.08) * s, rng) & fruit
        image[blob] *= np.array([0.8, 0.72, 0.7])
        mask[blob] = 3

    # ulcers: high contrast, dark
    for _ in range(rng.integers(0, 3)):
        uy, ux = _point_in_disk(rng, cy, cx, 0.8 * radius)
        blob = _polar_blob(rr, cc, uy, ux, rng.uniform(0.05, 0.07) * s, rng) & fruit
        image[blob] = np.array([0.28, 0.14, 0.05]) * rng.uniform(0.8, 1.2)
        mask[blob] = 4

    image += 0.015 * rng.standard_normal(image.shape)
    image = np.clip(image, 0.0, 1.0)
    return SegmentationSample(image=image, mask=mask, id=f"synth_{seed}_{index:05d}")


def synth_orange(seed: int, n: int, size: int = 96) -> list[SegmentationSample]:
    """``n`` synthetic navel-orange images with 5-class masks.

    Dark background, a shaded textured disc, one pole (blossom end, class 1,
    a two-tone round blob; or stem end, class 2, a green five-lobed star),
    0-3 low-contrast flaw patches (class 3) and 0-2 dark ulcer patches
    (class 4).  Each sample draws from its own stream keyed on (seed, index).
    """
    if size % 16:
        raise ConfigError(f"synthetic size {size} must be divisible by 16")
    return [synth_orange_sample(seed, i, size) for i in range(n)]


# -- VOC-style I/O -------------------------------------------------------

def _rgb_key(rgb: np.ndarray) -> np.ndarray:
    rgb = rgb.astype(np.int64)
    return (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]


def decode_mask(rgb: np.ndarray, palette: Mapping[int, Sequence[int]], name: str = "") -> np.ndarray:
    keys = _rgb_key(rgb)
    lookup = {(int(r) << 16) | (int(g) << 8) | int(b): cls for cls, (r, g, b) in palette.items()}
    uniq, inverse = np.unique(keys, return_inverse=True)
    classes = np.empty(len(uniq), dtype=np.int64)
    for i, key in enumerate(uniq):
        if int(key) not in lookup:
            row, col = np.argwhere(keys == key)[0]
            color = tuple(int(v) for v in rgb[row, col])
            raise LabelError(f"{name}: pixel (row {row}, col {col}) has colour {color} not in palette")
        classes[i] = lookup[int(key)]
    return classes[inverse.reshape(keys.shape)]


def _palette_image(mask: np.ndarray, palette: Mapping[int, Sequence[int]]) -> Image.Image:
    img = Image.fromarray(mask.astype(np.uint8), mode="P")
    flat = []
    for cls in range(256):
        flat.extend(palette.get(cls, (0, 0, 0)))
    img.putpalette(flat)
    return img


def save_voc_dir(samples: Iterable[SegmentationSample], root, palette=DEFAULT_PALETTE) -> tuple[Path, Path]:
    """Write samples as ``root/JPEGImages/<id>.png`` and paletted ``root/SegmentationClass/<id>.png``.

    Images are stored as 8-bit PNG (lossless) despite the VOC folder name.
    """
    root = Path(root)
    images_dir, masks_dir = root / "JPEGImages", root / "SegmentationClass"
    images_dir.mkdir(parents=True, exist_ok=True)
    masks_dir.mkdir(parents=True, exist_ok=True)
    for s in samples:
        missing = set(np.unique(s.mask).tolist()) - set(palette)
        if missing:
            raise LabelError(f"sample {s.id!r}: class ids {sorted(missing)} have no palette colour")
        rgb = np.clip(np.rint(s.image * 255), 0, 255).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(images_dir / f"{s.id}.png")
        _palette_image(s.mask, palette).save(masks_dir / f"{s.id}.png")
    return images_dir, masks_dir


def load_voc_dir(images_dir, masks_dir, palette=DEFAULT_PALETTE) -> list[SegmentationSample]:
    """Pair images with masks by file stem and decode masks through ``palette``.

    Samples come back sorted by stem.  Every image needs a mask and vice
    versa.
    """
    images_dir, masks_dir = Path(images_dir), Path(masks_dir)
    images = {p.stem: p for p in images_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES} if images_dir.exists() else {}
    masks = {p.stem: p for p in masks_dir.iterdir() if p.suffix.lower() == ".png"} if masks_dir.exists() else {}
    unpaired = sorted(set(images) ^ set(masks))
    if unpaired:
        side = "mask" if unpaired[0] in images else "image"
        raise PairingError(f"{unpaired[0]!r} has no matching {side} ({len(unpaired)} unpaired file(s))")
    out = []
    for stem in sorted(images):
        with Image.open(images[stem]) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        with Image.open(masks[stem]) as im:
            mrgb = np.asarray(im.convert("RGB"))
        mask = decode_mask(mrgb, palette, name=str(masks[stem]))
        out.append(SegmentationSample(image=rgb, mask=mask, id=stem))
    return out


# -- augmentation --------------------------------------------------------

@dataclass
class AugmentConfig:
    p: float = 0.6
    rotation: float = 180.0  # degrees, symmetric range
    crop_size: int = 100
    crop_padding: int = 10
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"augmentation probability must lie in [0, 1], got {self.p}")


@dataclass
class AffineTransform:
    """Output pixel (row, col) samples source ``matrix @ (row, col, 1)``."""

    matrix: np.ndarray = field(default_factory=lambda: np.eye(3))
    ops: list[str] = field(default_factory=list)

    @property
    def is_identity(self) -> bool:
        return not self.ops

    def then(self, step: np.ndarray, name: str) -> "AffineTransform":
        # applying `step` after the current ops: its output indexes into our output
        return AffineTransform(self.matrix @ step, self.ops + [name])

    def source_coords(self, h: int, w: int) -> np.ndarray:
        rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
        pts = np.stack([rr.ravel(), cc.ravel(), np.ones(h * w)])
        src = self.matrix @ pts
        return src[:2].reshape(2, h, w)


def hflip_matrix(h: int, w: int) -> np.ndarray:
    return np.array([[1.0, 0, 0], [0, -1.0, w - 1.0], [0, 0, 1]])


def vflip_matrix(h: int, w: int) -> np.ndarray:
    return np.array([[-1.0, 0, h - 1.0], [0, 1.0, 0], [0, 0, 1]])


def rotation_matrix(h: int, w: int, degrees: float) -> np.ndarray:
    t = math.radians(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    m = np.eye(3)
    m[:2, :2] = rot
    m[:2, 2] = np.array([cy, cx]) - rot @ np.array([cy, cx])
    return m


def crop_resize_matrix(h: int, w: int, top: int, left: int, crop: int, padding: int) -> np.ndarray:
    """Crop ``crop x crop`` at (top, left) of the zero-padded image, then resize to h x w."""
    sy, sx = crop / h, crop / w
    return np.array([
        [sy, 0, top - padding + 0.5 * sy - 0.5],
        [0, sx, left - padding + 0.5 * sx - 0.5],
        [0, 0, 1],
    ])


def draw_transform(h: int, w: int, cfg: AugmentConfig, rng: np.random.Generator) -> AffineTransform:
    """Independently with probability ``cfg.p`` each: h-mirror, v-mirror, rotation, crop+resize."""
    if cfg.p > 0 and cfg.crop_size > min(h, w) + 2 * cfg.crop_padding:
        raise ConfigError(
            f"crop {cfg.crop_size} exceeds padded image {h + 2 * cfg.crop_padding}x{w + 2 * cfg.crop_padding}"
        )
    t = AffineTransform()
    if rng.uniform() < cfg.p:
        t = t.then(hflip_matrix(h, w), "hflip")
    if rng.uniform() < cfg.p:
        t = t.then(vflip_matrix(h, w), "vflip")
    if rng.uniform() < cfg.p:
        angle = rng.uniform(-cfg.rotation, cfg.rotation)
        t = t.then(rotation_matrix(h, w, angle), f"rotate({angle:.3f})")
    if rng.uniform() < cfg.p:
        top = int(rng.integers(0, h + 2 * cfg.crop_padding - cfg.crop_size + 1))
        left = int(rng.integers(0, w + 2 * cfg.crop_padding - cfg.crop_size + 1))
        t = t.then(crop_resize_matrix(h, w, top, left, cfg.crop_size, cfg.crop_padding), f"crop({top},{left})")
    return t


def apply_transform(sample: SegmentationSample, t: AffineTransform) -> SegmentationSample:
    """Resample image (bilinear) and mask (nearest) on the same source grid; outside is 0."""
    if t.is_identity:
        return SegmentationSample(sample.image.copy(), sample.mask.copy(), sample.id)
    h, w = sample.mask.shape
    coords = t.source_coords(h, w)
    image = np.stack(
        [ndimage.map_coordinates(sample.image[..., ch], coords, order=1, mode="constant", cval=0.0)
         for ch in range(3)], axis=-1)
    mask = ndimage.map_coordinates(sample.mask, coords, order=0, mode="constant", cval=0)
    return SegmentationSample(np.clip(image, 0.0, 1.0), mask.astype(sample.mask.dtype), sample.id)


def hflip(sample: SegmentationSample) -> SegmentationSample:
    h, w = sample.mask.shape
    return apply_transform(sample, AffineTransform().then(hflip_matrix(h, w), "hflip"))


def vflip(sample: SegmentationSample) -> SegmentationSample:
    h, w = sample.mask.shape
    return apply_transform(sample, AffineTransform().then(vflip_matrix(h, w), "vflip"))


def rotate(sample: SegmentationSample, degrees: float) -> SegmentationSample:
    h, w = sample.mask.shape
    return apply_transform(sample, AffineTransform().then(rotation_matrix(h, w, degrees), "rotate"))


def augment(sample: SegmentationSample, cfg: AugmentConfig, rng: np.random.Generator) -> SegmentationSample:
    return apply_transform(sample, draw_transform(*sample.mask.shape, cfg, rng))
