"""
Prompt state for the multi-modal prompt mean teacher: the additive text prompt, the per-layer visual prompt tokens,
their initialisation (including the test-time warm start) and the EMA teacher update.
"""
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Sequence, Tuple, Union

import numpy as np

from ttaforge.core import CategorySpace, Image
from ttaforge.errors import ShapeError
from ttaforge.formats import container

VISUAL_INITS = ("warm", "random", "zero")


class PromptSet(object):
    """
    ``text`` is the |C| x d_T text prompt; ``visual`` holds one m x d_i array per encoder layer.

    The same structure carries prompt gradients and optimizer moments, which is why it exposes elementwise helpers.
    """

    __slots__ = ("text", "visual")

    def __init__(self, text: np.ndarray, visual: Sequence[np.ndarray], check: bool = True):
        self.text = np.array(text, dtype=np.float64)
        self.visual = [np.array(v, dtype=np.float64) for v in visual]
        if self.text.ndim != 2:
            raise ShapeError(f"Text prompt must be 2-D, got shape {self.text.shape}")
        if any(v.ndim != 2 for v in self.visual):
            raise ShapeError("Visual prompts must be 2-D per layer")
        if len({v.shape[0] for v in self.visual}) > 1:
            raise ShapeError("Every layer must carry the same number of visual prompt tokens")
        if check and not self.is_finite():
            raise ValueError("Prompt tensors contain non-finite entries")

    @property
    def m(self) -> int:
        return self.visual[0].shape[0] if self.visual else 0

    @property
    def num_layers(self) -> int:
        return len(self.visual)

    def arrays(self) -> List[np.ndarray]:
        return [self.text] + self.visual

    def tensors(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict([("PT", self.text)])
        for i, v in enumerate(self.visual):
            out[f"PI{i}"] = v
        return out

    @classmethod
    def from_tensors(cls, tensors: Dict[str, np.ndarray]) -> "PromptSet":
        if "PT" not in tensors:
            raise ShapeError("Prompt tensors lack the PT section")
        visual = []
        while f"PI{len(visual)}" in tensors:
            visual.append(tensors[f"PI{len(visual)}"])
        return cls(tensors["PT"], visual)

    def shapes(self) -> List[Tuple[int, ...]]:
        return [a.shape for a in self.arrays()]

    def same_shape(self, other: "PromptSet") -> bool:
        return self.shapes() == other.shapes()

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def copy(self) -> "PromptSet":
        return PromptSet(self.text, self.visual, check=False)

    def map(self, fn: Callable[..., np.ndarray], *others: "PromptSet") -> "PromptSet":
        """Apply ``fn`` tensor-by-tensor across this set and ``others`` (which must share its shapes)."""
        for other in others:
            if not self.same_shape(other):
                raise ShapeError(f"Prompt shapes differ: {self.shapes()} vs {other.shapes()}")
        text = fn(self.text, *[o.text for o in others])
        visual = [fn(v, *[o.visual[i] for o in others]) for i, v in enumerate(self.visual)]
        return PromptSet(text, visual, check=False)

    def zeros_like(self) -> "PromptSet":
        return self.map(np.zeros_like)

    def __add__(self, other: "PromptSet") -> "PromptSet":
        return self.map(np.add, other)

    def scale(self, factor: float) -> "PromptSet":
        return self.map(lambda a: a * factor)

    def allclose(self, other: "PromptSet", atol: float = 0.0, rtol: float = 0.0) -> bool:
        return self.same_shape(other) and all(
            np.allclose(a, b, atol=atol, rtol=rtol) for a, b in zip(self.arrays(), other.arrays())
        )

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter(self.arrays())

    def __repr__(self):
        return f"PromptSet(text={self.text.shape}, visual={self.num_layers}x{self.m})"


@dataclass
class WarmStartRecord:
    source_image_id: Union[int, str]
    pooled: List[np.ndarray] = field(default_factory=list)


def init_text(categories: CategorySpace, d_T: int) -> np.ndarray:
    return np.zeros((len(categories), d_T), dtype=np.float64)


def warm_start_visual(first_image: Image, backend, m: int, rng: np.random.Generator = None, noise_std: float = 1e-4,
                      image_id: Union[int, str] = 0) -> Tuple[List[np.ndarray], WarmStartRecord]:
    """
    Initialise the visual prompts from the first test image.

    Every prompt row at layer i starts as the mean over the token axis of that layer's input image tokens. Layers are
    visited in order, so the tokens pooled at layer i are the ones produced under the already initialised prompts of
    the previous layers, i.e. exactly what the teacher sees.

    Parameters
    ----------
    first_image : Image
        First stream image, weakly augmented the way the teacher sees it.
    backend : DetectorBackend
    m : int
        Prompt tokens per layer.
    rng : numpy.random.Generator
        Source of the symmetry-breaking noise; required when ``noise_std > 0``.
    noise_std : float
        Standard deviation of the noise added to the replicated rows.

    Returns
    -------
    (list of m x d arrays, WarmStartRecord)
    """
    if m < 0:
        raise ValueError("m must be non-negative")
    tokens = backend.tokenize(first_image)
    visual, pooled = [], []
    for i in range(backend.num_layers):
        mean = tokens.mean(axis=0)
        pooled.append(mean.copy())
        rows = np.tile(mean, (m, 1))
        if noise_std > 0 and m > 0:
            rows = rows + rng.normal(0.0, noise_std, size=rows.shape)
        visual.append(rows)
        tokens = backend.encode_layer(i, tokens, rows)
    return visual, WarmStartRecord(image_id, pooled)


def random_visual(backend, m: int, rng: np.random.Generator, std: float = 0.02) -> List[np.ndarray]:
    return [rng.normal(0.0, std, size=(m, d)) for d in backend.layer_dims]


def zero_visual(backend, m: int) -> List[np.ndarray]:
    return [np.zeros((m, d)) for d in backend.layer_dims]


def ema_update(teacher: PromptSet, student: PromptSet, gamma: float) -> PromptSet:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"EMA momentum must lie in [0, 1], got {gamma}")
    return teacher.map(lambda t, s: gamma * t + (1.0 - gamma) * s, student)


def save_prompts(path: Union[str, Path], prompts: PromptSet, seed: int = 0):
    container.write(path, prompts.tensors(), seed)


def load_prompts(path: Union[str, Path]) -> PromptSet:
    _, tensors = container.read(path)
    return PromptSet.from_tensors({k: v.astype(np.float64) for k, v in tensors.items()})
