"""
Geometry, image and detection primitives shared by every other module.

Boxes are corner-form ``(x1, y1, x2, y2)`` float pixels everywhere inside the package; the dataset files use
``(x, y, w, h)`` and are converted at the I/O boundary (see ``BoundingBox.from_xywh`` / ``to_xywh``).
"""
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from ttaforge.errors import DegenerateBox, ShapeError

# stream images must be at least this large on each side; crops only need one pixel
MIN_IMAGE_SIZE = 8


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"Non-finite box coordinates: {coords}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"Box corners out of order: {coords}")

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BoundingBox":
        return cls(float(x), float(y), float(x) + float(w), float(y) + float(h))

    def to_xywh(self) -> Tuple[float, float, float, float]:
        return self.x1, self.y1, self.x2 - self.x1, self.y2 - self.y1

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Tuple[float, float]:
        return (self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2

    def scaled(self, sx: float, sy: float) -> "BoundingBox":
        return BoundingBox(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


class Image(object):
    """
    An RGB image of floats in [0, 1], stored height x width x 3. The pixel array is made read-only so an Image can be
    shared freely between the teacher path, the memory and the student path.
    """

    __slots__ = ("_pixels",)

    def __init__(self, pixels: np.ndarray, copy: bool = True):
        pixels = np.array(pixels, dtype=np.float64) if copy else np.asarray(pixels, dtype=np.float64)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ShapeError(f"Expected an H x W x 3 array, got shape {pixels.shape}")
        if pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise ShapeError(f"Image has no pixels: {pixels.shape}")
        if not np.all(np.isfinite(pixels)) or pixels.min() < 0.0 or pixels.max() > 1.0:
            raise ValueError("Image pixels must be finite and within [0, 1]")
        pixels.setflags(write=False)
        self._pixels = pixels

    @classmethod
    def zeros(cls, height: int, width: int) -> "Image":
        return cls(np.zeros((height, width, 3)), copy=False)

    @classmethod
    def full(cls, height: int, width: int, value: float) -> "Image":
        return cls(np.full((height, width, 3), value, dtype=np.float64), copy=False)

    @property
    def pixels(self) -> np.ndarray:
        return self._pixels

    @property
    def height(self) -> int:
        return self._pixels.shape[0]

    @property
    def width(self) -> int:
        return self._pixels.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width

    def with_pixels(self, pixels: np.ndarray) -> "Image":
        return Image(np.clip(pixels, 0.0, 1.0), copy=False)

    def __eq__(self, other):
        return isinstance(other, Image) and self.shape == other.shape and np.array_equal(self._pixels, other._pixels)

    def __hash__(self):
        return hash((self.shape, self._pixels.tobytes()))

    def __repr__(self):
        return f"Image({self.height}x{self.width})"


def check_stream_image(image: Image):
    if image.height < MIN_IMAGE_SIZE or image.width < MIN_IMAGE_SIZE:
        raise ShapeError(f"Stream images must be at least {MIN_IMAGE_SIZE}px per side, got {image.shape}")


class Detection(object):
    """
    A predicted box with its full per-category score vector.

    ``label`` is the argmax of ``scores`` and ``score`` its maximum. Scores start out in [0, 1] but Memory Enhancement
    adds affinities to them, so enhanced detections may carry values above 1.
    """

    __slots__ = ("box", "scores")

    def __init__(self, box: BoundingBox, scores: Sequence[float]):
        scores = np.array(scores, dtype=np.float64)
        if scores.ndim != 1 or scores.size == 0:
            raise ShapeError(f"Detection scores must be a non-empty vector, got shape {scores.shape}")
        scores.setflags(write=False)
        self.box = box
        self.scores = scores

    @property
    def label(self) -> int:
        return int(np.argmax(self.scores))

    @property
    def score(self) -> float:
        return float(self.scores[self.label])

    def with_scores(self, scores: Sequence[float]) -> "Detection":
        return Detection(self.box, scores)

    def with_box(self, box: BoundingBox) -> "Detection":
        return Detection(box, self.scores)

    def __repr__(self):
        return f"Detection({self.box}, label={self.label}, score={self.score:.4f})"


@dataclass(frozen=True)
class CategorySpace:
    names: Tuple[str, ...]

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if not names:
            raise ValueError("A category space needs at least one category")
        if len(set(names)) != len(names):
            raise ValueError(f"Duplicate category names: {names}")
        if any(not name for name in names):
            raise ValueError("Category names must be non-empty")

    def __len__(self):
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    @property
    def text(self) -> str:
        """The concatenated detector text input, e.g. ``"square. disk. triangle."``."""
        return " ".join(f"{name}." for name in self.names)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    intersection = iw * ih
    union = a.area + b.area - intersection
    if union <= 0:
        return 0.0
    return float(intersection / union)


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of two (n, 4) / (k, 4) corner-form arrays."""
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(boxes_a[:, None, 2], boxes_b[None, :, 2]) - np.maximum(boxes_a[:, None, 0], boxes_b[None, :, 0])
    ih = np.minimum(boxes_a[:, None, 3], boxes_b[None, :, 3]) - np.maximum(boxes_a[:, None, 1], boxes_b[None, :, 1])
    intersection = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (boxes_a[:, 2] - boxes_a[:, 0]) * (boxes_a[:, 3] - boxes_a[:, 1])
    area_b = (boxes_b[:, 2] - boxes_b[:, 0]) * (boxes_b[:, 3] - boxes_b[:, 1])
    union = area_a[:, None] + area_b[None, :] - intersection
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, intersection / np.where(union > 0, union, 1.0), 0.0)
    return out


def clamp_box(b: BoundingBox, image: Image) -> BoundingBox:
    x1 = min(max(b.x1, 0.0), image.width)
    y1 = min(max(b.y1, 0.0), image.height)
    x2 = min(max(b.x2, 0.0), image.width)
    y2 = min(max(b.y2, 0.0), image.height)
    return BoundingBox(x1, y1, x2, y2)


def pixel_bounds(image: Image, box: BoundingBox) -> Tuple[int, int, int, int]:
    """Integer (x1, y1, x2, y2) of the clamped box, rounded outward."""
    b = clamp_box(box, image)
    x1, y1 = int(math.floor(b.x1)), int(math.floor(b.y1))
    x2, y2 = int(math.ceil(b.x2)), int(math.ceil(b.y2))
    if x2 - x1 < 1 or y2 - y1 < 1:
        raise DegenerateBox(f"{box} covers no pixel of a {image.height}x{image.width} image")
    return x1, y1, x2, y2


def crop(image: Image, box: BoundingBox) -> Image:
    x1, y1, x2, y2 = pixel_bounds(image, box)
    return Image(image.pixels[y1:y2, x1:x2])


def boxes_array(boxes: List[BoundingBox]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4))
    return np.stack([b.as_array() for b in boxes])


def nms(detections: Sequence[Detection], iou_thresh: float = 0.5) -> List[Detection]:
    """Class-agnostic greedy non-maximum suppression; survivors come back sorted by score (stable)."""
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    if not order:
        return []
    boxes = boxes_array([detections[i].box for i in order])
    overlaps = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    for rank in range(len(order)):
        if suppressed[rank]:
            continue
        keep.append(detections[order[rank]])
        suppressed |= overlaps[rank] > iou_thresh
    return keep


@dataclass(frozen=True)
class Prediction:
    """A detection flattened to what evaluation and the predictions file need."""

    image_id: int
    box: BoundingBox
    score: float
    category: int

    @classmethod
    def from_detection(cls, image_id: int, detection: Detection) -> "Prediction":
        return cls(image_id, detection.box, detection.score, detection.label)
