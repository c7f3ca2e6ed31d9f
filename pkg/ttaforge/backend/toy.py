"""
Desk-scale stand-ins for the frozen detector and the instance feature extractor.

ToyDetector
    tokens      X0 = patches(image) . W0                                  (no bias: a black image gives zero tokens)
    layer i     Z = concat(P_{i-1}, X_{i-1});  out = ReLU(Z . W_i + b_i) + mean_rows(Z);  X_i = out[m:]
    text        T~ = T + P_T
    scores      sigmoid(X_N . T~^T / sqrt(d))
    boxes       o = tanh(X_N . W_loc + b_loc); centre shifted by o1*P, o2*P, size P*exp(o3), P*exp(o4)

Only the prompt tensors receive gradients. Fixed weights are float32, set once (seeded, then optionally fit on a
source split by ``pretrain_source``) and never touched again.
"""
import math
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from ttaforge import msg
from ttaforge.augment import resize_pixels
from ttaforge.core import BoundingBox, CategorySpace, Detection, Image, iou_matrix
from ttaforge.errors import NonFiniteLoss, ShapeError
from ttaforge.formats import container
from ttaforge.prompts import PromptSet
from . import DetectorBackend, FeatureEmbedder, LossValue, Target

WEIGHT_TAGS = ("W0", "W1", "b1", "W2", "b2", "T", "Wloc", "bloc")


@dataclass
class _Forward:
    """Intermediates of one forward pass, kept for the backward pass."""

    grid: Tuple[int, int]
    layer_inputs: List[np.ndarray]
    preacts: List[np.ndarray]
    embedding: np.ndarray
    text: np.ndarray
    logits: np.ndarray
    offsets: np.ndarray


class ToyDetector(DetectorBackend):
    num_layers = 2

    def __init__(self, categories: CategorySpace, weights: Dict[str, np.ndarray], seed: int = 0):
        missing = [tag for tag in WEIGHT_TAGS if tag not in weights]
        if missing:
            raise ShapeError(f"Missing detector weights {missing}")
        self.categories = categories
        self.seed = int(seed)
        self._weights = OrderedDict()
        for tag in WEIGHT_TAGS:
            w = np.array(weights[tag], dtype=np.float32)
            w.setflags(write=False)
            self._weights[tag] = w
        # float64 working copies; the float32 originals are what gets serialized
        self._w = {tag: w.astype(np.float64) for tag, w in self._weights.items()}

        in_dim, d = self._w["W0"].shape
        patch = int(round(math.sqrt(in_dim / 3)))
        if 3 * patch * patch != in_dim:
            raise ShapeError(f"W0 has {in_dim} rows, which is not 3 * P^2")
        self.patch_size = patch
        self.dim = d
        expected = {
            "W1": (d, d), "b1": (d,), "W2": (d, d), "b2": (d,),
            "T": (len(categories), d), "Wloc": (d, 4), "bloc": (4,),
        }
        for tag, shape in expected.items():
            if self._w[tag].shape != shape:
                raise ShapeError(f"Weight {tag} has shape {self._w[tag].shape}, expected {shape}")

    @classmethod
    def from_seed(cls, categories: CategorySpace, seed: int = 0, patch_size: int = 8, dim: int = 32) -> "ToyDetector":
        rng = np.random.default_rng(seed)
        in_dim = 3 * patch_size * patch_size
        c = len(categories)
        weights = OrderedDict(
            W0=rng.normal(0.0, 1.0 / math.sqrt(in_dim), (in_dim, dim)),
            W1=rng.normal(0.0, math.sqrt(2.0 / dim), (dim, dim)),
            b1=rng.normal(0.0, 0.1, dim),
            W2=rng.normal(0.0, math.sqrt(2.0 / dim), (dim, dim)),
            b2=rng.normal(0.0, 0.1, dim),
            T=rng.normal(0.0, 1.0, (c, dim)),
            Wloc=rng.normal(0.0, 0.1 / math.sqrt(dim), (dim, 4)),
            bloc=np.zeros(4),
        )
        return cls(categories, weights, seed)

    # serialization

    @property
    def weights(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict(self._weights)

    def weight_bytes(self) -> bytes:
        return container.dumps(self._weights, self.seed)

    def save(self, path: Union[str, Path]):
        container.write(path, self._weights, self.seed)

    @classmethod
    def load(cls, path: Union[str, Path], categories: CategorySpace) -> "ToyDetector":
        seed, weights = container.read(path)
        return cls(categories, weights, seed)

    # DetectorBackend properties

    @property
    def layer_dims(self) -> List[int]:
        return [self.dim] * self.num_layers

    @property
    def text_dim(self) -> int:
        return self.dim

    @property
    def max_text_tokens(self) -> int:
        return len(self.categories)

    # forward pieces

    def grid(self, image: Image) -> Tuple[int, int]:
        p = self.patch_size
        if image.height % p or image.width % p:
            raise ShapeError(f"Image {image.height}x{image.width} is not divisible by the patch size {p}")
        return image.height // p, image.width // p

    def tokenize(self, image: Image) -> np.ndarray:
        gh, gw = self.grid(image)
        p = self.patch_size
        patches = image.pixels.reshape(gh, p, gw, p, 3).transpose(0, 2, 1, 3, 4).reshape(gh * gw, p * p * 3)
        return patches @ self._w["W0"]

    def _layer(self, index: int) -> Tuple[np.ndarray, np.ndarray]:
        if not 0 <= index < self.num_layers:
            raise ShapeError(f"Layer index {index} out of range")
        return self._w[f"W{index + 1}"], self._w[f"b{index + 1}"]

    def _check_prompt(self, prompt: np.ndarray) -> np.ndarray:
        prompt = np.asarray(prompt, dtype=np.float64)
        if prompt.size == 0:
            return prompt.reshape(0, self.dim)
        if prompt.ndim != 2 or prompt.shape[1] != self.dim:
            raise ShapeError(f"Visual prompt must be m x {self.dim}, got {prompt.shape}")
        return prompt

    def _layer_forward(self, index: int, tokens: np.ndarray, prompt: np.ndarray):
        weight, bias = self._layer(index)
        prompt = self._check_prompt(prompt)
        if tokens.ndim != 2 or tokens.shape[1] != self.dim:
            raise ShapeError(f"Tokens must be n x {self.dim}, got {tokens.shape}")
        z = np.concatenate([prompt, tokens], axis=0)
        a = z @ weight + bias
        out = np.maximum(a, 0.0) + z.mean(axis=0)
        return z, a, out[prompt.shape[0]:]

    def encode_layer(self, index: int, tokens: np.ndarray, prompt: np.ndarray) -> np.ndarray:
        return self._layer_forward(index, tokens, prompt)[2]

    def text_embed(self, categories: CategorySpace, text_prompt: np.ndarray) -> np.ndarray:
        text_prompt = np.asarray(text_prompt, dtype=np.float64)
        if len(categories) != len(self.categories):
            raise ShapeError(f"Detector knows {len(self.categories)} categories, got {len(categories)}")
        if text_prompt.shape != self._w["T"].shape:
            raise ShapeError(f"Text prompt must be {self._w['T'].shape}, got {text_prompt.shape}")
        return self._w["T"] + text_prompt

    def _check_prompts(self, prompts: PromptSet):
        if prompts.num_layers != self.num_layers:
            raise ShapeError(f"Expected {self.num_layers} visual prompt tensors, got {prompts.num_layers}")

    def _forward(self, image: Image, prompts: PromptSet) -> _Forward:
        self._check_prompts(prompts)
        grid = self.grid(image)
        tokens = self.tokenize(image)
        layer_inputs, preacts = [], []
        for i, prompt in enumerate(prompts.visual):
            z, a, tokens = self._layer_forward(i, tokens, prompt)
            layer_inputs.append(z)
            preacts.append(a)
        text = self.text_embed(self.categories, prompts.text)
        logits = tokens @ text.T / math.sqrt(self.dim)
        offsets = np.tanh(tokens @ self._w["Wloc"] + self._w["bloc"])
        return _Forward(grid, layer_inputs, preacts, tokens, text, logits, offsets)

    def patch_boxes(self, grid: Tuple[int, int]) -> np.ndarray:
        """(n, 4) corner-form patch rectangles in token order."""
        gh, gw = grid
        p = self.patch_size
        rows, cols = np.divmod(np.arange(gh * gw), gw)
        return np.stack([cols * p, rows * p, (cols + 1) * p, (rows + 1) * p], axis=1).astype(np.float64)

    def _box_params(self, grid: Tuple[int, int], offsets: np.ndarray) -> np.ndarray:
        """Predicted (cx/P, cy/P, w/P, h/P) per token, before clamping."""
        patches = self.patch_boxes(grid) / self.patch_size
        cx = (patches[:, 0] + patches[:, 2]) / 2 + offsets[:, 0]
        cy = (patches[:, 1] + patches[:, 3]) / 2 + offsets[:, 1]
        return np.stack([cx, cy, np.exp(offsets[:, 2]), np.exp(offsets[:, 3])], axis=1)

    def predict(self, image: Image, prompts: PromptSet) -> List[Detection]:
        fwd = self._forward(image, prompts)
        scores = expit(fwd.logits)
        params = self._box_params(fwd.grid, fwd.offsets) * self.patch_size
        x1 = np.clip(params[:, 0] - params[:, 2] / 2, 0.0, image.width)
        y1 = np.clip(params[:, 1] - params[:, 3] / 2, 0.0, image.height)
        x2 = np.clip(params[:, 0] + params[:, 2] / 2, 0.0, image.width)
        y2 = np.clip(params[:, 1] + params[:, 3] / 2, 0.0, image.height)
        order = np.argsort(-scores.max(axis=1), kind="stable")
        return [Detection(BoundingBox(x1[k], y1[k], x2[k], y2[k]), scores[k]) for k in order]

    # training signal

    def assign(self, box: BoundingBox, grid: Tuple[int, int]) -> int:
        """Token whose patch has the highest IoU with ``box`` (lowest index on ties)."""
        overlaps = iou_matrix(box.as_array()[None, :], self.patch_boxes(grid))[0]
        k = int(np.argmax(overlaps))
        if overlaps[k] > 0:
            return k
        gh, gw = grid
        cx, cy = box.center
        col = min(max(int(cx // self.patch_size), 0), gw - 1)
        row = min(max(int(cy // self.patch_size), 0), gh - 1)
        return row * gw + col

    def loss_and_grad(self, image: Image, targets: Sequence[Target], prompts: PromptSet) -> Tuple[LossValue, PromptSet]:
        """
        L_total = L_cls + L_loc and its gradient with respect to every prompt tensor.

        L_cls is the mean over all (token, class) pairs of the binary cross-entropy between the predicted score and
        the assignment indicator; positive pairs are weighted by their target weight. L_loc is the weighted mean over
        targets of the mean absolute difference between the assigned token's box parameters and the target's.
        """
        fwd = self._forward(image, prompts)
        n, c = fwd.logits.shape
        d = self.dim
        p = self.patch_size

        indicator = np.zeros((n, c))
        pos_weight = np.zeros((n, c))
        assigned = []
        for target in targets:
            if not 0 <= target.category < c:
                raise ShapeError(f"Target category {target.category} outside [0, {c})")
            k = self.assign(target.box, fwd.grid)
            indicator[k, target.category] = 1.0
            pos_weight[k, target.category] = max(pos_weight[k, target.category], float(target.weight))
            assigned.append((k, target))
        weight = np.where(indicator > 0, pos_weight, 1.0)

        s = fwd.logits
        loss_cls = float(np.sum(weight * (np.logaddexp(0.0, s) - indicator * s)) / (n * c))
        d_logits = weight * (expit(s) - indicator) / (n * c)

        d_offsets = np.zeros_like(fwd.offsets)
        loss_loc = 0.0
        if assigned:
            params = self._box_params(fwd.grid, fwd.offsets)
            scale = 1.0 / (4 * len(assigned))
            for k, target in assigned:
                cx, cy = target.box.center
                goal = np.array([cx / p, cy / p, target.box.width / p, target.box.height / p])
                residual = params[k] - goal
                loss_loc += target.weight * float(np.abs(residual).sum()) * scale
                # d params / d offsets = (1, 1, exp(o3), exp(o4))
                chain = np.array([1.0, 1.0, params[k, 2], params[k, 3]])
                d_offsets[k] += target.weight * scale * np.sign(residual) * chain

        total = loss_cls + loss_loc
        if not math.isfinite(total):
            raise NonFiniteLoss(f"Loss is {total} (cls={loss_cls}, loc={loss_loc})")

        d_pre_loc = d_offsets * (1.0 - fwd.offsets ** 2)
        d_tokens = d_logits @ fwd.text / math.sqrt(d) + d_pre_loc @ self._w["Wloc"].T
        grad_text = d_logits.T @ fwd.embedding / math.sqrt(d)

        grad_visual = [None] * self.num_layers
        for i in reversed(range(self.num_layers)):
            weight_i, _ = self._layer(i)
            z, a = fwd.layer_inputs[i], fwd.preacts[i]
            m = z.shape[0] - n
            d_out = np.zeros_like(z)
            d_out[m:] = d_tokens
            d_pre = d_out * (a > 0)
            d_z = d_pre @ weight_i.T + d_out.sum(axis=0) / z.shape[0]
            grad_visual[i] = d_z[:m]
            d_tokens = d_z[m:]

        return LossValue(total, loss_cls, loss_loc), PromptSet(grad_text, grad_visual, check=False)


def pretrain_source(detector: ToyDetector, images: Sequence[Image], annotations: Sequence[Sequence[Tuple[BoundingBox, int]]],
                    l2: float = 1e-3, pos_weight_cap: float = 10.0, ridge: float = 1e-2) -> ToyDetector:
    """
    Fit the class embeddings and the box head on a labelled source split.

    Class embeddings come from class-balanced, L2-regularised logistic regression over unprompted encoded tokens
    (positives are the max-IoU tokens of each object). The box head is a ridge regression of the arctanh of the
    clipped target offsets on the positive tokens. The encoder weights are kept as they are.
    """
    empty = detector.empty_prompts(0)
    p = detector.patch_size
    features, labels, loc_x, loc_y = [], [], [], []
    for image, objects in zip(images, annotations):
        fwd = detector._forward(image, empty)
        patches = detector.patch_boxes(fwd.grid)
        y = np.zeros((fwd.embedding.shape[0], len(detector.categories)))
        for box, category in objects:
            k = detector.assign(box, fwd.grid)
            y[k, category] = 1.0
            pcx, pcy = (patches[k, 0] + patches[k, 2]) / 2, (patches[k, 1] + patches[k, 3]) / 2
            cx, cy = box.center
            goal = np.array([(cx - pcx) / p, (cy - pcy) / p, math.log(box.width / p), math.log(box.height / p)])
            loc_x.append(fwd.embedding[k])
            loc_y.append(np.arctanh(np.clip(goal, -0.95, 0.95)))
        features.append(fwd.embedding)
        labels.append(y)

    x = np.concatenate(features) / math.sqrt(detector.dim)
    y = np.concatenate(labels)
    text = np.array(detector.weights["T"], dtype=np.float64)

    for c in range(y.shape[1]):
        positives = y[:, c] > 0
        n_pos = int(positives.sum())
        if n_pos == 0:
            msg.logMessage(f"No source examples for category {detector.categories.names[c]}; keeping seeded embedding",
                           level=msg.WARNING)
            continue
        sample_weight = np.where(positives, min((len(y) - n_pos) / n_pos, pos_weight_cap), 1.0)
        sample_weight /= sample_weight.sum()
        yc = y[:, c]

        def objective(t):
            s = x @ t
            value = np.sum(sample_weight * (np.logaddexp(0.0, s) - yc * s)) + 0.5 * l2 * t @ t
            grad = x.T @ (sample_weight * (expit(s) - yc)) + l2 * t
            return value, grad

        result = minimize(objective, text[c], jac=True, method="L-BFGS-B", options={"maxiter": 500})
        text[c] = result.x

    weights = detector.weights
    weights["T"] = text
    if loc_x:
        design = np.hstack([np.array(loc_x), np.ones((len(loc_x), 1))])
        gram = design.T @ design + ridge * np.eye(design.shape[1])
        solution = np.linalg.solve(gram, design.T @ np.array(loc_y))
        weights["Wloc"] = solution[:-1]
        weights["bloc"] = solution[-1]

    msg.logMessage(f"Source pre-training on {len(images)} images, {len(loc_x)} objects", level=msg.INFO)
    return ToyDetector(detector.categories, weights, detector.seed)


class ToyEmbedder(FeatureEmbedder):
    """Crop -> bilinear 16x16 -> centred, flattened -> fixed seeded projection (+ bias) -> L2 normalised."""

    crop_size = 16

    def __init__(self, seed: int = 0, dim: int = 64):
        rng = np.random.default_rng([seed, 0x0E])
        in_dim = self.crop_size * self.crop_size * 3
        self.seed = seed
        self._dim = dim
        self.projection = rng.normal(0.0, 1.0 / math.sqrt(in_dim), (in_dim, dim)).astype(np.float32).astype(np.float64)
        self.bias = rng.normal(0.0, 0.01, dim).astype(np.float32).astype(np.float64)
        self.projection.setflags(write=False)
        self.bias.setflags(write=False)

    @property
    def dim(self) -> int:
        return self._dim

    def embed(self, crop: Image) -> np.ndarray:
        resized = resize_pixels(crop.pixels, self.crop_size, self.crop_size)
        feat = (resized.reshape(-1) - 0.5) @ self.projection + self.bias
        norm = np.linalg.norm(feat)
        if norm == 0.0:
            feat = np.zeros(self._dim)
            feat[0] = 1.0
            return feat
        return feat / norm
