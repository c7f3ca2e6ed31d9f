"""
Instance Dynamic Memory: one bounded queue of high-confidence pseudo-label instances per category.

Queues start empty on every run. Once a queue is full a new instance only gets in by scoring strictly higher than the
weakest stored one, which it then replaces.
"""
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Union

import numpy as np

from ttaforge import msg
from ttaforge.core import Detection, Image, crop
from ttaforge.errors import DegenerateBox
from ttaforge.formats import save_image
from ttaforge.paths import ensure_dir


@dataclass(frozen=True)
class MemoryTriplet:
    img: Image
    feat: np.ndarray
    score: float
    category: int
    source_step: int = 0

    def __post_init__(self):
        feat = np.array(self.feat, dtype=np.float64)
        feat.setflags(write=False)
        object.__setattr__(self, "feat", feat)
        if abs(np.linalg.norm(feat) - 1.0) > 1e-6:
            raise ValueError(f"Memory features must be unit vectors, got norm {np.linalg.norm(feat)}")


class DynamicQueue(object):
    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError(f"Queue capacity must be at least 1, got {capacity}")
        self.capacity = int(capacity)
        self.items: List[MemoryTriplet] = []

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    @property
    def full(self) -> bool:
        return len(self.items) >= self.capacity

    def min_score(self) -> float:
        return min(t.score for t in self.items)

    def insert(self, triplet: MemoryTriplet) -> bool:
        if not self.full:
            self.items.append(triplet)
            return True
        lowest = self.min_score()
        if triplet.score <= lowest:
            return False
        # among equally weak entries the oldest goes
        victim = min(
            (i for i, t in enumerate(self.items) if t.score == lowest), key=lambda i: (self.items[i].source_step, i)
        )
        self.items[victim] = triplet
        return True

    def scores(self) -> List[float]:
        return [t.score for t in self.items]


class InstanceDynamicMemory(object):
    """
    Per-category ``DynamicQueue`` map.

    Parameters
    ----------
    num_categories : int
    capacity : int
        Maximum instances per category (default 20).
    """

    def __init__(self, num_categories: int, capacity: int = 20):
        self.capacity = capacity
        self.queues: Dict[int, DynamicQueue] = {c: DynamicQueue(capacity) for c in range(num_categories)}
        self.skipped = 0

    def __len__(self):
        return sum(len(q) for q in self.queues.values())

    @property
    def empty(self) -> bool:
        return len(self) == 0

    def insert(self, triplet: MemoryTriplet) -> bool:
        return self.queues[triplet.category].insert(triplet)

    def harvest(self, image: Image, pseudo_labels: Sequence[Detection], embedder, th_pl: float,
                step: int = 0) -> List[MemoryTriplet]:
        """
        Crop, embed and insert every pseudo-label scoring above ``th_pl``; returns the triplets that got in.

        Scores above 1 (left by memory enhancement) are clamped before storage. Boxes covering no pixel are counted in
        ``skipped`` and ignored.
        """
        inserted = []
        for det in pseudo_labels:
            score = det.score
            if not score > th_pl:
                continue
            try:
                patch = crop(image, det.box)
            except DegenerateBox:
                self.skipped += 1
                msg.logMessage(f"Skipping degenerate pseudo-label {det.box}", level=msg.DEBUG)
                continue
            triplet = MemoryTriplet(patch, embedder.embed(patch), min(score, 1.0), det.label, step)
            if self.insert(triplet):
                inserted.append(triplet)
        return inserted

    def prototypes(self) -> Dict[int, np.ndarray]:
        """Renormalised mean feature per non-empty category; categories whose mean vanishes are left out."""
        out = {}
        for category, queue in self.queues.items():
            if not len(queue):
                continue
            mean = np.mean([t.feat for t in queue], axis=0)
            norm = np.linalg.norm(mean)
            if norm < 1e-12:
                continue
            out[category] = mean / norm
        return out

    def triplets(self) -> List[MemoryTriplet]:
        return [t for c in sorted(self.queues) for t in self.queues[c]]

    def sample(self, k: int, rng: np.random.Generator) -> List[MemoryTriplet]:
        if k < 1:
            raise ValueError("k must be at least 1")
        pool = self.triplets()
        if not pool:
            return []
        return [pool[int(i)] for i in rng.integers(0, len(pool), size=k)]

    def sizes(self) -> Dict[int, int]:
        return {c: len(q) for c, q in self.queues.items()}

    def dump(self, directory: Union[str, Path], category_names: Sequence[str] = None):
        """Write every stored crop as PNG under one sub-directory per category, plus an ``index.json``."""
        directory = ensure_dir(directory)
        index = []
        for category, queue in self.queues.items():
            name = category_names[category] if category_names else str(category)
            subdir = ensure_dir(directory / name)
            for i, triplet in enumerate(queue):
                path = subdir / f"{i:03d}.png"
                save_image(path, triplet.img)
                index.append(
                    {
                        "file": str(path.relative_to(directory)),
                        "category": category,
                        "score": triplet.score,
                        "source_step": triplet.source_step,
                        "feat": triplet.feat.tolist(),
                    }
                )
        (directory / "index.json").write_text(json.dumps(index, indent=1))
        msg.logMessage(f"Dumped {len(index)} memory instances to {directory}", level=msg.INFO)
