"""
Weak and strong test-time augmentation.

The teacher sees the weak view (random resize only); the student sees the strong view (random resize, one colour
operation, random erasing). Both return a ``GeometricTransform`` so boxes can be carried between the two geometries.
"""
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.ndimage import map_coordinates

from ttaforge.core import BoundingBox, Image
from .corruptions import CORRUPTIONS, CorruptionSpec, corrupt

COLOR_OPS = ("brightness", "contrast", "solarize", "posterize")


@dataclass(frozen=True)
class GeometricTransform:
    src_h: int
    src_w: int
    dst_h: int
    dst_w: int

    @property
    def sx(self) -> float:
        return self.dst_w / self.src_w

    @property
    def sy(self) -> float:
        return self.dst_h / self.src_h

    def map_box(self, box: BoundingBox) -> BoundingBox:
        return box.scaled(self.sx, self.sy)

    def inverse(self) -> "GeometricTransform":
        return GeometricTransform(self.dst_h, self.dst_w, self.src_h, self.src_w)

    def then(self, other: "GeometricTransform") -> "GeometricTransform":
        if (other.src_h, other.src_w) != (self.dst_h, self.dst_w):
            raise ValueError("Transforms do not chain")
        return GeometricTransform(self.src_h, self.src_w, other.dst_h, other.dst_w)

    @classmethod
    def identity(cls, image: Image) -> "GeometricTransform":
        return cls(image.height, image.width, image.height, image.width)


@dataclass(frozen=True)
class AugmentationSpec:
    kind: str = "weak"
    resize_scales: Tuple[int, ...] = (64, 80, 96)
    patch_size: int = 8
    max_erase: int = 4
    erase_fill: float = 0.5
    erase_frac: float = 0.2
    ops: Tuple[str, ...] = COLOR_OPS

    def __post_init__(self):
        if self.kind not in ("weak", "strong"):
            raise ValueError(f"Unknown augmentation kind {self.kind!r}")
        object.__setattr__(self, "resize_scales", tuple(int(s) for s in self.resize_scales))
        if not self.resize_scales:
            raise ValueError("resize_scales must not be empty")
        for scale in self.resize_scales:
            if scale <= 0 or scale % self.patch_size:
                raise ValueError(f"Resize target {scale} is not a positive multiple of the patch size {self.patch_size}")
        unknown = set(self.ops) - set(COLOR_OPS)
        if unknown:
            raise ValueError(f"Unknown colour ops {sorted(unknown)}")


def resize_pixels(pixels: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resampling with pixel-centre alignment and edge replication."""
    src_h, src_w = pixels.shape[:2]
    if (src_h, src_w) == (height, width):
        return np.array(pixels, copy=True)
    ys = (np.arange(height) + 0.5) * (src_h / height) - 0.5
    xs = (np.arange(width) + 0.5) * (src_w / width) - 0.5
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    out = np.empty((height, width, pixels.shape[2]), dtype=np.float64)
    for channel in range(pixels.shape[2]):
        out[..., channel] = map_coordinates(pixels[..., channel], [grid_y, grid_x], order=1, mode="nearest")
    return np.clip(out, 0.0, 1.0)


def resize(image: Image, height: int, width: int) -> Tuple[Image, GeometricTransform]:
    transform = GeometricTransform(image.height, image.width, height, width)
    if (height, width) == image.shape:
        return image, transform
    return Image(resize_pixels(image.pixels, height, width), copy=False), transform


def target_size(height: int, width: int, scale: int, patch_size: int) -> Tuple[int, int]:
    """Shorter side to ``scale``; longer side to the nearest multiple of the patch size keeping the aspect ratio."""
    short, long_ = min(height, width), max(height, width)
    other = max(patch_size, int(round(long_ * scale / short / patch_size)) * patch_size)
    return (scale, other) if height <= width else (other, scale)


def snap_to_patch(image: Image, patch_size: int) -> Tuple[Image, GeometricTransform]:
    """Resize to the nearest patch multiple (identity when already aligned); used for the evaluation view."""
    height = max(patch_size, int(round(image.height / patch_size)) * patch_size)
    width = max(patch_size, int(round(image.width / patch_size)) * patch_size)
    return resize(image, height, width)


def random_resize(image: Image, rng: np.random.Generator, spec: AugmentationSpec) -> Tuple[Image, GeometricTransform]:
    scale = spec.resize_scales[int(rng.integers(len(spec.resize_scales)))]
    return resize(image, *target_size(image.height, image.width, scale, spec.patch_size))


def weak(image: Image, rng: np.random.Generator, spec: AugmentationSpec) -> Tuple[Image, GeometricTransform]:
    return random_resize(image, rng, spec)


# colour operations; all take and return float arrays in [0, 1]


def brightness(pixels: np.ndarray, u: float) -> np.ndarray:
    return np.clip(pixels * u, 0.0, 1.0)


def contrast(pixels: np.ndarray, u: float) -> np.ndarray:
    mean = pixels.mean()
    return np.clip((pixels - mean) * u + mean, 0.0, 1.0)


def solarize(pixels: np.ndarray, threshold: float) -> np.ndarray:
    return np.where(pixels > threshold, 1.0 - pixels, pixels)


def posterize(pixels: np.ndarray, bits: int) -> np.ndarray:
    levels = 2 ** int(bits)
    quantized = np.minimum(np.floor(pixels * levels), levels - 1)
    return quantized / (levels - 1)


def rand_erase(pixels: np.ndarray, rng: np.random.Generator, max_patches: int = 4, frac: float = 0.2,
               fill: float = 0.5, count: int = None) -> Tuple[np.ndarray, list]:
    """
    Fill up to ``max_patches`` random rectangles, each at most ``frac`` of each dimension, with ``fill``.

    Returns the erased array and the list of (x1, y1, x2, y2) integer rectangles.
    """
    out = np.array(pixels, copy=True)
    height, width = out.shape[:2]
    if count is None:
        count = int(rng.integers(0, max_patches + 1))
    max_w = max(1, int(math.floor(frac * width)))
    max_h = max(1, int(math.floor(frac * height)))
    rects = []
    for _ in range(count):
        rw = int(rng.integers(1, max_w + 1))
        rh = int(rng.integers(1, max_h + 1))
        x = int(rng.integers(0, width - rw + 1))
        y = int(rng.integers(0, height - rh + 1))
        out[y : y + rh, x : x + rw] = fill
        rects.append((x, y, x + rw, y + rh))
    return out, rects


def color_op(pixels: np.ndarray, op: str, rng: np.random.Generator) -> np.ndarray:
    if op == "brightness":
        return brightness(pixels, rng.uniform(0.5, 1.5))
    if op == "contrast":
        return contrast(pixels, rng.uniform(0.5, 1.5))
    if op == "solarize":
        return solarize(pixels, rng.uniform(0.5, 1.0))
    if op == "posterize":
        return posterize(pixels, int(rng.integers(3, 8)))
    raise ValueError(f"Unknown colour op {op!r}")


def strong(image: Image, rng: np.random.Generator, spec: AugmentationSpec) -> Tuple[Image, GeometricTransform]:
    resized, transform = random_resize(image, rng, spec)
    op = spec.ops[int(rng.integers(len(spec.ops)))]
    pixels = color_op(resized.pixels, op, rng)
    pixels, _ = rand_erase(pixels, rng, spec.max_erase, spec.erase_frac, spec.erase_fill)
    return Image(np.clip(pixels, 0.0, 1.0), copy=False), transform


__all__ = [
    "AugmentationSpec",
    "COLOR_OPS",
    "CORRUPTIONS",
    "CorruptionSpec",
    "GeometricTransform",
    "brightness",
    "color_op",
    "contrast",
    "corrupt",
    "posterize",
    "rand_erase",
    "random_resize",
    "resize",
    "resize_pixels",
    "snap_to_patch",
    "solarize",
    "strong",
    "target_size",
    "weak",
]
