from dataclasses import dataclass
from typing import Tuple

import numpy as np

from ttaforge.errors import ShapeError
from ttaforge.prompts import PromptSet


@dataclass
class AdamW(object):
    """
    Adam with decoupled weight decay over a PromptSet, with one learning rate for the text prompt and one for the
    visual prompts. A group whose learning rate is 0 (or that is frozen) is left exactly as it is.

    The update of every entry, at step t = 1, 2, ...::

        p <- p * (1 - lr * weight_decay)
        m <- beta1 * m + (1 - beta1) * g
        v <- beta2 * v + (1 - beta2) * g^2
        p <- p - lr * (m / (1 - beta1^t)) / (sqrt(v / (1 - beta2^t)) + eps)
    """

    lr_text: float = 0.02
    lr_visual: float = 0.2
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    train_text: bool = True
    train_visual: bool = True

    def init_state(self, params: PromptSet) -> Tuple[PromptSet, PromptSet]:
        return params.zeros_like(), params.zeros_like()

    def step(self, params: PromptSet, grads: PromptSet, moments: Tuple[PromptSet, PromptSet],
             t: int) -> Tuple[PromptSet, Tuple[PromptSet, PromptSet]]:
        """Return the updated parameters and moments for step ``t`` (1-based); nothing is modified in place."""
        if t < 1:
            raise ValueError("Optimizer steps are counted from 1")
        first, second = moments
        if not (params.same_shape(grads) and params.same_shape(first) and params.same_shape(second)):
            raise ShapeError("Parameters, gradients and moments must share shapes")
        beta1, beta2 = self.betas
        c1, c2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t

        def update(p, g, m, v, lr, train):
            if not train or lr == 0:
                return p, m, v
            p = p * (1.0 - lr * self.weight_decay)
            m = beta1 * m + (1.0 - beta1) * g
            v = beta2 * v + (1.0 - beta2) * g * g
            p = p - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            return p, m, v

        text = update(params.text, grads.text, first.text, second.text, self.lr_text, self.train_text)
        visual = [
            update(p, g, m, v, self.lr_visual, self.train_visual)
            for p, g, m, v in zip(params.visual, grads.visual, first.visual, second.visual)
        ]
        new_params = PromptSet(text[0], [u[0] for u in visual], check=False)
        new_first = PromptSet(text[1], [u[1] for u in visual], check=False)
        new_second = PromptSet(text[2], [u[2] for u in visual], check=False)
        return new_params, (new_first, new_second)
