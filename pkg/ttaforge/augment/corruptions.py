"""
Seeded image corruptions for the synthetic target domains.

Four of the common-corruption families are implemented. Severity constants are this package's own calibration for
64px toy images, not those of the reference corruption package.
"""
from dataclasses import dataclass

import numpy as np

from ttaforge.core import Image

CORRUPTIONS = ("gaussian_noise", "shot_noise", "brightness", "contrast")

GAUSSIAN_SIGMA = (0.04, 0.06, 0.08, 0.09, 0.10)
SHOT_RATE = (60, 25, 12, 5, 3)
BRIGHTNESS_SHIFT = (0.1, 0.2, 0.3, 0.4, 0.5)
CONTRAST_FACTOR = (0.75, 0.6, 0.45, 0.3, 0.15)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ValueError(f"Unknown corruption {self.kind!r}; choose one of {CORRUPTIONS}")
        if not isinstance(self.severity, (int, np.integer)) or isinstance(self.severity, bool):
            raise TypeError("Severity must be an integer.")
        if not 1 <= self.severity <= 5:
            raise ValueError(f"Severity must be between 1 and 5, got {self.severity}")

    def __repr__(self):
        return f"CorruptionSpec({self.kind}, severity={self.severity}, seed={self.seed})"


def corrupt(image: Image, spec: CorruptionSpec) -> Image:
    rng = np.random.default_rng(spec.seed)
    x = image.pixels
    s = spec.severity - 1
    if spec.kind == "gaussian_noise":
        out = x + rng.normal(0.0, GAUSSIAN_SIGMA[s], size=x.shape)
    elif spec.kind == "shot_noise":
        rate = SHOT_RATE[s]
        out = rng.poisson(x * rate) / rate
    elif spec.kind == "brightness":
        out = x + BRIGHTNESS_SHIFT[s]
    else:
        mean = x.mean(axis=(0, 1), keepdims=True)
        out = (x - mean) * CONTRAST_FACTOR[s] + mean
    return Image(np.clip(out, 0.0, 1.0), copy=False)
