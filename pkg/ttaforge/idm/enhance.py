"""
Memory Enhancement: raise the class scores of confident detections by their crop's affinity to each memory prototype.
"""
import math
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from ttaforge import msg
from ttaforge.core import Detection, Image, crop
from ttaforge.errors import DegenerateBox

# per-benchmark affinity defaults
PRESETS = {"pascal-c": (5.0, 5.0), "coco-c": (1.0, 5.0), "odinw": (1.0, 5.0)}


@dataclass(frozen=True)
class AffinityParams:
    alpha: float = 5.0
    beta: float = 5.0
    th_me: float = 0.3

    def __post_init__(self):
        for name in ("alpha", "beta"):
            value = getattr(self, name)
            if not math.isfinite(value) or value <= 0:
                raise ValueError(f"{name} must be finite and positive, got {value}")
        if not 0.0 <= self.th_me <= 1.0:
            raise ValueError(f"th_me must lie in [0, 1], got {self.th_me}")

    @classmethod
    def preset(cls, name: str, th_me: float = 0.3) -> "AffinityParams":
        alpha, beta = PRESETS[name]
        return cls(alpha, beta, th_me)


def affinity(x, params: AffinityParams):
    """alpha * exp(-beta * (1 - x)); works elementwise on arrays."""
    return params.alpha * np.exp(-params.beta * (1.0 - np.asarray(x, dtype=np.float64)))


def enhance_one(image: Image, detection: Detection, prototypes: Dict[int, np.ndarray], embedder,
                params: AffinityParams) -> Detection:
    if not prototypes or not detection.score > params.th_me:
        return detection
    try:
        patch = crop(image, detection.box)
    except DegenerateBox:
        msg.logMessage(f"Not enhancing degenerate detection {detection.box}", level=msg.DEBUG)
        return detection
    feat = embedder.embed(patch)
    bonus = np.zeros_like(detection.scores)
    for category, prototype in prototypes.items():
        bonus[category] = affinity(float(feat @ prototype), params)
    return detection.with_scores(detection.scores + bonus)


def enhance(image: Image, detections: Sequence[Detection], prototypes: Dict[int, np.ndarray], embedder,
            params: AffinityParams) -> List[Detection]:
    """
    Enhanced copy of ``detections`` in input order.

    Detections scoring above ``th_me`` get ``affinity(f . v_c)`` added to class ``c`` for every prototype ``v_c``,
    where ``f`` is the embedding of the detection's crop; the label follows the new argmax. The rest are returned as
    they are (same objects).
    """
    return [enhance_one(image, det, prototypes, embedder, params) for det in detections]
