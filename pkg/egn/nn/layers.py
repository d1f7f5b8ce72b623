"""
Dense layers.
"""
from typing import Optional

import numpy as np

from ..tensor import Tensor, matmul, reshape
from .base import Module, Parameter

__all__ = ["Linear", "TwoLayerMlp", "LayerNorm"]


class Linear(Module):
    """
    Affine map ``x @ weight + bias`` over the last axis.

    Weights and bias are drawn uniformly from ±1/sqrt(in_features).

    :param zero_init: Start with all parameters at zero.
    :param bias: Without bias the map is linear, so a zero input gives
        exactly zero.
    """

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        zero_init: bool = False,
        bias: bool = True,
    ) -> None:
        self.in_features = in_features
        self.out_features = out_features
        bound = 1.0 / np.sqrt(in_features)

        if zero_init:
            self.weight = Parameter(np.zeros((in_features, out_features)))
        else:
            self.weight = Parameter(rng.uniform(-bound, bound, (in_features, out_features)))
        self.bias: Optional[Parameter] = None
        if bias:
            self.bias = Parameter(
                np.zeros(out_features) if zero_init else rng.uniform(-bound, bound, out_features)
            )

    def _affine(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight)
        return out if self.bias is None else out + self.bias

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim == 2:
            return self._affine(x)

        # Fold leading axes into one matrix product.
        lead = x.shape[:-1]
        out = self._affine(reshape(x, (-1, self.in_features)))
        return reshape(out, lead + (self.out_features,))


class TwoLayerMlp(Module):
    """
    Linear -> ReLU -> Linear.
    """

    def __init__(
        self,
        in_features: int,
        hidden_features: int,
        out_features: int,
        rng: np.random.Generator,
        zero_init_output: bool = False,
    ) -> None:
        self.fc1 = Linear(in_features, hidden_features, rng)
        self.fc2 = Linear(hidden_features, out_features, rng, zero_init=zero_init_output)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).relu())


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5) -> None:
        self.eps = eps
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        centered = x - x.mean(axis=-1, keepdims=True)
        variance = (centered * centered).mean(axis=-1, keepdims=True)
        return centered / (variance + self.eps).sqrt() * self.gamma + self.beta
