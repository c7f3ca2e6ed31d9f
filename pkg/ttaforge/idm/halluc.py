"""
Memory Hallucination: fabricate positives for images without pseudo-labels by mixing stored instances into them.
"""
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
from PIL import Image as PILImage, ImageDraw

from ttaforge import msg
from ttaforge.augment import resize_pixels
from ttaforge.backend import Target
from ttaforge.core import BoundingBox, Image, iou
from ttaforge.errors import ShapeError
from . import InstanceDynamicMemory


@dataclass(frozen=True)
class HallucinationConfig:
    max_instances: int = 3
    th_iou: float = 0.2
    max_retries: int = 10
    beta_a: float = 8.0
    beta_b: float = 2.0
    scale_range: Tuple[float, float] = (0.5, 1.5)

    def __post_init__(self):
        if self.max_instances < 1:
            raise ValueError("max_instances must be at least 1")
        if not 0.0 <= self.th_iou <= 1.0:
            raise ValueError(f"th_iou must lie in [0, 1], got {self.th_iou}")
        if self.max_retries < 1:
            raise ValueError("max_retries must be at least 1")
        if self.beta_a <= 0 or self.beta_b <= 0:
            raise ValueError("Beta shape parameters must be positive")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"Invalid scale range {self.scale_range}")


@dataclass
class HallucinationResult:
    image: Image
    labels: List[Target] = field(default_factory=list)
    no_memory: bool = False
    lambdas: List[float] = field(default_factory=list)


def blend(region: Image, instance: Image, lam: float) -> Image:
    if region.shape != instance.shape:
        raise ShapeError(f"Cannot blend {instance.shape} into {region.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"Mixing coefficient must lie in [0, 1], got {lam}")
    return Image(np.clip(lam * instance.pixels + (1.0 - lam) * region.pixels, 0.0, 1.0), copy=False)


def _scaled_size(crop: Image, factor: float, height: int, width: int) -> Tuple[int, int]:
    h = int(round(crop.height * factor))
    w = int(round(crop.width * factor))
    # shrink uniformly until it fits
    fit = min(1.0, height / max(h, 1), width / max(w, 1))
    h = min(height, max(1, int(math.floor(h * fit))))
    w = min(width, max(1, int(math.floor(w * fit))))
    return h, w


def hallucinate(negative: Image, memory: InstanceDynamicMemory, config: HallucinationConfig,
                rng: np.random.Generator) -> HallucinationResult:
    """
    Paste between 1 and ``max_instances`` randomly drawn memory instances into ``negative``.

    Each instance is rescaled by a factor drawn from ``scale_range`` (shrunk to fit if needed), given its own mixing
    coefficient from Beta(beta_a, beta_b) and placed at a uniformly random position. A placement overlapping an already
    placed box by more than ``th_iou`` is redrawn up to ``max_retries`` times before the instance is dropped. Each
    placed instance becomes a target weighted by its stored score.
    """
    if memory.empty:
        return HallucinationResult(negative, [], no_memory=True)

    n = int(rng.integers(1, config.max_instances + 1))
    triplets = memory.sample(n, rng)
    pixels = np.array(negative.pixels, copy=True)
    height, width = negative.shape
    placed: List[BoundingBox] = []
    labels, lambdas = [], []

    for triplet in triplets:
        factor = rng.uniform(*config.scale_range)
        h, w = _scaled_size(triplet.img, factor, height, width)
        instance = Image(resize_pixels(triplet.img.pixels, h, w), copy=False)
        lam = float(rng.beta(config.beta_a, config.beta_b))

        box = None
        for _ in range(1 + config.max_retries):
            x = int(rng.integers(0, width - w + 1))
            y = int(rng.integers(0, height - h + 1))
            candidate = BoundingBox(x, y, x + w, y + h)
            if all(iou(candidate, other) <= config.th_iou for other in placed):
                box = candidate
                break
        if box is None:
            msg.logMessage(f"Dropping hallucinated instance after {1 + config.max_retries} placements", level=msg.DEBUG)
            continue

        x1, y1, x2, y2 = int(box.x1), int(box.y1), int(box.x2), int(box.y2)
        region = Image(pixels[y1:y2, x1:x2])
        pixels[y1:y2, x1:x2] = blend(region, instance, lam).pixels
        placed.append(box)
        labels.append(Target(box, triplet.category, triplet.score))
        lambdas.append(lam)

    return HallucinationResult(Image(pixels, copy=False), labels, False, lambdas)


def dump_hallucination(result: HallucinationResult, path: Union[str, Path], category_names=None):
    """PNG of the hallucinated image with the placed boxes outlined."""
    data = np.round(result.image.pixels * 255.0).astype(np.uint8)
    canvas = PILImage.fromarray(data)
    draw = ImageDraw.Draw(canvas)
    for target in result.labels:
        b = target.box
        draw.rectangle([b.x1, b.y1, b.x2 - 1, b.y2 - 1], outline=(255, 0, 0))
        name = category_names[target.category] if category_names else str(target.category)
        draw.text((b.x1 + 1, b.y1 + 1), name, fill=(255, 255, 0))
    canvas.save(path, format="PNG")
