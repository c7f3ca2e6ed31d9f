"""
Synthetic shape-detection datasets and the on-disk dataset/prediction formats.

A dataset directory holds ``annotations.json`` and an ``images/`` directory of PNG files::

    {"images": [{"id", "file", "width", "height"}],
     "annotations": [{"image_id", "bbox": [x, y, w, h], "category_id"}],
     "categories": [{"id", "name"}]}

Predictions are JSON lines ``{"image_id", "bbox", "score", "category_id"}``.
"""
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ttaforge import msg
from ttaforge.augment import CorruptionSpec, corrupt
from ttaforge.core import BoundingBox, CategorySpace, Image, Prediction, check_stream_image, iou
from ttaforge.errors import DatasetError
from ttaforge.formats import load_image, save_image
from ttaforge.paths import ensure_dir

CLASSES = ("square", "disk", "triangle")

SOURCE_PALETTE = {"square": (0.85, 0.20, 0.20), "disk": (0.20, 0.80, 0.25), "triangle": (0.20, 0.30, 0.85)}
BACKGROUND = 0.45
# Target colours: each class moved this far toward the next class's source colour (square -> disk -> triangle -> square).
# Convex mixes stay inside the source colour span; only the class margins shrink.
PALETTE_MIX = 0.4
TARGET_PALETTE = {
    name: tuple(
        round((1 - PALETTE_MIX) * own + PALETTE_MIX * nxt, 4)
        for own, nxt in zip(SOURCE_PALETTE[name], SOURCE_PALETTE[CLASSES[(i + 1) % len(CLASSES)]])
    )
    for i, name in enumerate(CLASSES)
}

SHIFT_NAMES = {"gauss": "gaussian_noise", "shot": "shot_noise", "bright": "brightness", "contrast": "contrast"}

ANNOTATIONS = "annotations.json"


@dataclass(frozen=True)
class SyntheticSpec:
    num_images: int = 200
    size: int = 64
    classes: Tuple[str, ...] = CLASSES
    min_objects: int = 1
    max_objects: int = 4
    min_object_size: int = 10
    max_object_size: int = 16
    max_iou: float = 0.3
    noise_sigma: float = 0.02
    color_jitter: float = 0.04
    palette_shift: bool = False
    corruptions: Tuple[Tuple[str, int], ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.num_images < 0:
            raise ValueError(f"num_images must be non-negative, got {self.num_images}")
        if self.size < 8 or self.size % 8:
            raise ValueError(f"Image size must be a positive multiple of 8, got {self.size}")
        unknown = set(self.classes) - set(CLASSES)
        if unknown:
            raise ValueError(f"Unknown shape classes {sorted(unknown)}")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("Object count range must satisfy 1 <= min_objects <= max_objects")
        if not 1 <= self.min_object_size <= self.max_object_size <= self.size:
            raise ValueError("Object size range does not fit the image")
        for kind, severity in self.corruptions:
            CorruptionSpec(kind, severity)

    @property
    def categories(self) -> CategorySpace:
        return CategorySpace(self.classes)

    @property
    def shift_name(self) -> str:
        parts = (["palette"] if self.palette_shift else []) + [
            f"{short}{severity}" for kind, severity in self.corruptions for short, name in SHIFT_NAMES.items() if name == kind
        ]
        return ",".join(parts) or "none"


def parse_shift(text: str) -> Tuple[bool, Tuple[Tuple[str, int], ...]]:
    """``"palette,gauss3"`` -> ``(True, (("gaussian_noise", 3),))``; raises ValueError on unknown names."""
    palette, corruptions = False, []
    for token in filter(None, (t.strip().lower() for t in (text or "none").split(","))):
        if token == "none":
            continue
        if token == "palette":
            palette = True
            continue
        found = re.fullmatch(r"([a-z]+)([1-5])", token)
        if not found or found.group(1) not in SHIFT_NAMES:
            raise ValueError(f"Unknown target shift {token!r}")
        corruptions.append((SHIFT_NAMES[found.group(1)], int(found.group(2))))
    return palette, tuple(corruptions)


@dataclass(frozen=True)
class ImageRecord:
    id: int
    file: str
    width: int
    height: int


@dataclass(frozen=True)
class Annotation:
    image_id: int
    box: BoundingBox
    category: int


@dataclass
class Dataset:
    root: Path
    categories: CategorySpace
    images: List[ImageRecord]
    annotations: List[Annotation] = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    def image(self, record: ImageRecord) -> Image:
        image = load_image(self.root / record.file)
        if image.shape != (record.height, record.width):
            raise DatasetError(self.root / record.file, f"size {image.shape} disagrees with the annotation file")
        check_stream_image(image)
        return image

    def stream(self):
        """(image id, Image) pairs in annotation-file order."""
        for record in self.images:
            yield record.id, self.image(record)

    def ground_truth(self) -> Dict[int, List[Tuple[BoundingBox, int]]]:
        out = {record.id: [] for record in self.images}
        for a in self.annotations:
            out[a.image_id].append((a.box, a.category))
        return out


# rendering


def _mask(shape: str, size: int, x: int, y: int, s: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if shape == "square":
        return (xx >= x) & (xx < x + s) & (yy >= y) & (yy < y + s)
    if shape == "disk":
        r = s / 2
        return (xx - x - r) ** 2 + (yy - y - r) ** 2 <= r * r
    # apex at top centre, base along the bottom edge
    u = (yy - y) / s
    return (yy >= y) & (yy < y + s) & (np.abs(xx - x - s / 2) <= u * s / 2)


def _place(rng: np.random.Generator, spec: SyntheticSpec, boxes: List[BoundingBox], tries: int = 50):
    for _ in range(tries):
        s = int(rng.integers(spec.min_object_size, spec.max_object_size + 1))
        x = int(rng.integers(0, spec.size - s + 1))
        y = int(rng.integers(0, spec.size - s + 1))
        box = BoundingBox(x, y, x + s, y + s)
        if all(iou(box, other) <= spec.max_iou for other in boxes):
            return box
    return None


def render(spec: SyntheticSpec, seed_sequence: np.random.SeedSequence) -> Tuple[Image, List[Tuple[BoundingBox, int]]]:
    """One synthetic image and its (box, category index) objects."""
    rng = np.random.default_rng(seed_sequence)
    palette = TARGET_PALETTE if spec.palette_shift else SOURCE_PALETTE
    pixels = np.clip(BACKGROUND + rng.normal(0.0, spec.noise_sigma, (spec.size, spec.size, 3)), 0.0, 1.0)

    objects = []
    for _ in range(int(rng.integers(spec.min_objects, spec.max_objects + 1))):
        box = _place(rng, spec, [b for b, _ in objects])
        if box is None:
            break
        category = int(rng.integers(len(spec.classes)))
        name = spec.classes[category]
        color = np.clip(np.array(palette[name]) + rng.normal(0.0, spec.color_jitter, 3), 0.0, 1.0)
        mask = _mask(name, spec.size, int(box.x1), int(box.y1), int(box.width))
        pixels[mask] = color
        objects.append((box, category))

    image = Image(pixels, copy=False)
    for kind, severity in spec.corruptions:
        image = corrupt(image, CorruptionSpec(kind, severity, int(seed_sequence.generate_state(1)[0])))
    return image, objects


def generate(spec: SyntheticSpec, out: Union[str, Path], executor=None) -> Dataset:
    """Render ``spec`` into directory ``out``; every image gets its own spawned seed sequence."""
    from ttaforge import execution

    executor = executor or execution.executor
    root = ensure_dir(out)
    image_dir = ensure_dir(root / "images")
    children = np.random.SeedSequence(spec.seed).spawn(spec.num_images)
    rendered = executor.map(lambda child: render(spec, child), children)

    images, annotations = [], []
    for index, (image, objects) in enumerate(rendered):
        msg.showProgress(index + 1, 0, spec.num_images)
        relative = f"images/{index:06d}.png"
        save_image(image_dir / f"{index:06d}.png", image)
        images.append(ImageRecord(index, relative, image.width, image.height))
        annotations.extend(Annotation(index, box, category) for box, category in objects)

    dataset = Dataset(root, spec.categories, images, annotations)
    save(dataset)
    msg.logMessage(f"Generated {spec.num_images} images ({spec.shift_name}) into {root}", level=msg.INFO)
    return dataset


# annotation files


def save(dataset: Dataset, path: Union[str, Path] = None):
    path = Path(path) if path else Path(dataset.root) / ANNOTATIONS
    document = {
        "images": [{"id": r.id, "file": r.file, "width": r.width, "height": r.height} for r in dataset.images],
        "annotations": [
            {"image_id": a.image_id, "bbox": list(a.box.to_xywh()), "category_id": a.category + 1}
            for a in dataset.annotations
        ],
        "categories": [{"id": i + 1, "name": name} for i, name in enumerate(dataset.categories)],
    }
    path.write_text(json.dumps(document, indent=1))


def _field(path, record: dict, key: str, kind, where: str):
    if key not in record:
        raise DatasetError(path, f"{where} lacks {key!r}", field=key)
    value = record[key]
    if not isinstance(value, kind) or isinstance(value, bool):
        raise DatasetError(path, f"{where} has a malformed {key!r}: {value!r}", field=key)
    return value


def load(path: Union[str, Path]) -> Dataset:
    """Read a dataset directory (or its annotation file) and check ids and boxes."""
    path = Path(path)
    if path.is_dir():
        path = path / ANNOTATIONS
    try:
        document = json.loads(path.read_text())
    except FileNotFoundError:
        raise DatasetError(path, "annotation file not found")
    except json.JSONDecodeError as ex:
        raise DatasetError(path, f"not valid JSON ({ex.msg})", line=ex.lineno)

    for section in ("images", "annotations", "categories"):
        if not isinstance(document.get(section), list):
            raise DatasetError(path, f"missing {section!r} list", field=section)

    category_ids = {}
    names = []
    for i, c in enumerate(document["categories"]):
        cid = _field(path, c, "id", int, f"categories[{i}]")
        names.append(_field(path, c, "name", str, f"categories[{i}]"))
        if cid in category_ids:
            raise DatasetError(path, f"duplicate category id {cid}", field="categories")
        category_ids[cid] = i
    try:
        categories = CategorySpace(tuple(names))
    except ValueError as ex:
        raise DatasetError(path, str(ex), field="categories")

    images = {}
    for i, r in enumerate(document["images"]):
        where = f"images[{i}]"
        record = ImageRecord(
            _field(path, r, "id", int, where),
            _field(path, r, "file", str, where),
            _field(path, r, "width", int, where),
            _field(path, r, "height", int, where),
        )
        if record.id in images:
            raise DatasetError(path, f"duplicate image id {record.id}", field="images")
        images[record.id] = record

    annotations = []
    for i, a in enumerate(document["annotations"]):
        where = f"annotations[{i}]"
        image_id = _field(path, a, "image_id", int, where)
        cid = _field(path, a, "category_id", int, where)
        bbox = _field(path, a, "bbox", list, where)
        if image_id not in images:
            raise DatasetError(path, f"{where} references unknown image id {image_id}", field="image_id")
        if cid not in category_ids:
            raise DatasetError(path, f"{where} references unknown category id {cid}", field="category_id")
        if len(bbox) != 4 or not all(isinstance(v, (int, float)) for v in bbox):
            raise DatasetError(path, f"{where} bbox must be [x, y, w, h]", field="bbox")
        try:
            box = BoundingBox.from_xywh(*bbox)
        except ValueError as ex:
            raise DatasetError(path, f"{where} {ex}", field="bbox")
        record = images[image_id]
        if box.x1 < 0 or box.y1 < 0 or box.x2 > record.width or box.y2 > record.height:
            raise DatasetError(path, f"{where} bbox {bbox} leaves image {image_id}", field="bbox")
        annotations.append(Annotation(image_id, box, category_ids[cid]))

    return Dataset(path.parent, categories, list(images.values()), annotations)


def load_categories(path: Union[str, Path]) -> CategorySpace:
    return load(path).categories


# predictions


def save_predictions(path: Union[str, Path], predictions: Sequence[Prediction]):
    with open(path, "w") as f:
        for p in predictions:
            record = {
                "image_id": p.image_id,
                "bbox": list(p.box.to_xywh()),
                "score": float(p.score),
                "category_id": p.category + 1,
            }
            f.write(json.dumps(record) + "\n")


def load_predictions(path: Union[str, Path], num_categories: Optional[int] = None) -> List[Prediction]:
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as ex:
                raise DatasetError(path, f"not valid JSON ({ex.msg})", line=lineno)
            where = "prediction"
            for key, kind in (("image_id", int), ("bbox", list), ("score", (int, float)), ("category_id", int)):
                if key not in record:
                    raise DatasetError(path, f"{where} lacks {key!r}", line=lineno, field=key)
                if not isinstance(record[key], kind) or isinstance(record[key], bool):
                    raise DatasetError(path, f"malformed {key!r}: {record[key]!r}", line=lineno, field=key)
            category = record["category_id"] - 1
            if category < 0 or (num_categories is not None and category >= num_categories):
                raise DatasetError(path, f"unknown category id {record['category_id']}", line=lineno, field="category_id")
            try:
                box = BoundingBox.from_xywh(*record["bbox"])
            except (TypeError, ValueError) as ex:
                raise DatasetError(path, f"bad bbox ({ex})", line=lineno, field="bbox")
            out.append(Prediction(record["image_id"], box, float(record["score"]), category))
    return out
