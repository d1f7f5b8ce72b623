"""
Adaptive-moment optimizer with decoupled weight decay, and the learning-rate
schedules used by the training loops.
"""
import math
from typing import Dict, List, Sequence

import numpy as np

from .errors import ConfigError
from .nn import Parameter

__all__ = ("AdamW", "cosine_lr", "learning_rate")


class AdamW:
    """
    :param parameters: The parameters to update. Shared parameters should
        appear once (`Module.parameters()` takes care of that).
    :param weight_decay: Decoupled decay, applied to parameters of rank >= 2
        only (biases, norm gains and pooling queries are not decayed).
    """

    def __init__(
        self,
        parameters: Sequence[Parameter],
        lr: float,
        weight_decay: float = 0.0,
        betas: Sequence[float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> None:
        self.parameters: List[Parameter] = list(parameters)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0

        self._m: Dict[int, np.ndarray] = {id(p): np.zeros(p.shape) for p in self.parameters}
        self._v: Dict[int, np.ndarray] = {id(p): np.zeros(p.shape) for p in self.parameters}

    def zero_grad(self) -> None:
        for p in self.parameters:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        correction1 = 1.0 - self.beta1**self.step_count
        correction2 = 1.0 - self.beta2**self.step_count

        for p in self.parameters:
            if p.grad is None:
                continue
            m = self._m[id(p)]
            v = self._v[id(p)]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad

            data = p.data
            if self.weight_decay and p.ndim >= 2:
                data = data * (1.0 - self.lr * self.weight_decay)
            update = (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            p.data = data - self.lr * update


def cosine_lr(epoch: int, epochs: int, base_lr: float) -> float:
    """
    Cosine annealing from `base_lr` at epoch 0 to zero at the last epoch.
    """
    if epochs <= 1:
        return base_lr
    fraction = min(max(epoch / (epochs - 1), 0.0), 1.0)
    return base_lr * (1.0 + math.cos(math.pi * fraction)) / 2.0


def learning_rate(scheduler: str, epoch: int, epochs: int, base_lr: float) -> float:
    if scheduler == "cosine":
        return cosine_lr(epoch, epochs, base_lr)
    if scheduler == "constant":
        return base_lr
    raise ConfigError([f"Unknown scheduler {scheduler!r}."])
