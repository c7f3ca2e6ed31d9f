"""
The detector/embedder seam the adaptation framework runs against.

``DetectorBackend`` stands in for a frozen vision-language detector: a text side modulated by an additive text prompt,
an image encoder whose layers accept prepended visual prompt tokens, and a fusion head producing per-class scores and
boxes. ``FeatureEmbedder`` stands in for the frozen instance feature extractor used by the memory.
"""
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from ttaforge.core import BoundingBox, CategorySpace, Detection, Image
from ttaforge.errors import ShapeError
from ttaforge.prompts import PromptSet


@dataclass(frozen=True)
class Target:
    """A training target: box in the image's own pixel frame, category index, loss weight."""

    box: BoundingBox
    category: int
    weight: float = 1.0


@dataclass(frozen=True)
class LossValue:
    total: float
    cls: float
    loc: float

    def __float__(self):
        return float(self.total)


class DetectorBackend(ABC):
    categories: CategorySpace

    @property
    @abstractmethod
    def num_layers(self) -> int:
        """Number of encoder layers N that take visual prompts."""

    @property
    @abstractmethod
    def layer_dims(self) -> List[int]:
        """Token dimension d_i of every encoder layer."""

    @property
    @abstractmethod
    def text_dim(self) -> int:
        """Text token dimension d_T."""

    @property
    @abstractmethod
    def max_text_tokens(self) -> int:
        pass

    @abstractmethod
    def tokenize(self, image: Image) -> np.ndarray:
        pass

    @abstractmethod
    def encode_layer(self, index: int, tokens: np.ndarray, prompt: np.ndarray) -> np.ndarray:
        """Run layer ``index`` on ``concat(prompt, tokens)`` and return only the image-token rows."""

    def encode(self, tokens: np.ndarray, visual_prompts: Sequence[np.ndarray]) -> np.ndarray:
        if len(visual_prompts) != self.num_layers:
            raise ShapeError(f"Expected {self.num_layers} visual prompt tensors, got {len(visual_prompts)}")
        for i, prompt in enumerate(visual_prompts):
            tokens = self.encode_layer(i, tokens, prompt)
        return tokens

    @abstractmethod
    def text_embed(self, categories: CategorySpace, text_prompt: np.ndarray) -> np.ndarray:
        pass

    @abstractmethod
    def predict(self, image: Image, prompts: PromptSet) -> List[Detection]:
        pass

    @abstractmethod
    def loss_and_grad(self, image: Image, targets: Sequence[Target], prompts: PromptSet) -> Tuple[LossValue, PromptSet]:
        pass

    def empty_prompts(self, m: int = 0) -> PromptSet:
        """Zero text prompt and ``m`` zero visual tokens per layer."""
        return PromptSet(
            np.zeros((len(self.categories), self.text_dim)), [np.zeros((m, d)) for d in self.layer_dims], check=False
        )


class FeatureEmbedder(ABC):
    @property
    @abstractmethod
    def dim(self) -> int:
        pass

    @abstractmethod
    def embed(self, crop: Image) -> np.ndarray:
        """Unit-norm feature vector of an instance crop."""


from .toy import ToyDetector, ToyEmbedder, pretrain_source  # noqa: E402
