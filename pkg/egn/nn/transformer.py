"""
Pre-norm vision transformer pieces and attention pooling.
"""
import numpy as np

from ..errors import DimensionError
from ..tensor import Tensor, matmul, reshape, transpose
from .base import Module, Parameter
from .layers import LayerNorm, Linear, TwoLayerMlp

__all__ = ["MultiHeadSelfAttention", "TransformerBlock", "AttentionPool"]


class MultiHeadSelfAttention(Module):
    """
    Scaled dot-product self-attention over (batch, tokens, dim) input.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator) -> None:
        if dim % heads:
            raise DimensionError(f"Dimension {dim} is not divisible by {heads} heads.")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads

        self.query = Linear(dim, dim, rng)
        self.key = Linear(dim, dim, rng)
        self.value = Linear(dim, dim, rng)
        self.output = Linear(dim, dim, rng)

    def _split_heads(self, x: Tensor) -> Tensor:
        batch, tokens, _ = x.shape
        x = reshape(x, (batch, tokens, self.heads, self.head_dim))
        return transpose(x, (0, 2, 1, 3))

    def weights(self, x: Tensor) -> Tensor:
        """
        Attention weights, shape (batch, heads, tokens, tokens). Every row sums
        to one.
        """
        q = self._split_heads(self.query(x))
        k = self._split_heads(self.key(x))
        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(self.head_dim))
        return scores.softmax(axis=-1)

    def forward(self, x: Tensor) -> Tensor:
        batch, tokens, _ = x.shape
        attended = matmul(self.weights(x), self._split_heads(self.value(x)))
        merged = reshape(transpose(attended, (0, 2, 1, 3)), (batch, tokens, self.dim))
        return self.output(merged)


class TransformerBlock(Module):
    """
    ``x + attention(norm(x))`` followed by ``x + feedforward(norm(x))``.
    """

    def __init__(self, dim: int, heads: int, ffn_dim: int, rng: np.random.Generator) -> None:
        self.attention_norm = LayerNorm(dim)
        self.attention = MultiHeadSelfAttention(dim, heads, rng)
        self.feedforward_norm = LayerNorm(dim)
        self.feedforward = TwoLayerMlp(dim, ffn_dim, dim, rng)

    def forward(self, z: Tensor) -> Tensor:
        z = z + self.attention(self.attention_norm(z))
        return z + self.feedforward(self.feedforward_norm(z))


class AttentionPool(Module):
    """
    Weighted mean of the tokens. The weights are a softmax over the scores of
    one learned query against the raw tokens, scaled by 1/sqrt(dim).
    """

    def __init__(self, dim: int, rng: np.random.Generator) -> None:
        self.dim = dim
        bound = 1.0 / np.sqrt(dim)
        self.query = Parameter(rng.uniform(-bound, bound, dim))

    def weights(self, z: Tensor) -> Tensor:
        "Pooling weights, shape (batch, tokens)."
        batch, tokens, _ = z.shape
        scores = matmul(z, reshape(self.query, (self.dim, 1)))
        return (reshape(scores, (batch, tokens)) * (1.0 / np.sqrt(self.dim))).softmax(axis=-1)

    def forward(self, z: Tensor) -> Tensor:
        batch, tokens, _ = z.shape
        w = reshape(self.weights(z), (batch, 1, tokens))
        return reshape(matmul(w, z), (batch, self.dim))
