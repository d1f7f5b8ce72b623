from .base import Module, Parameter
from .conv import Conv2d, Upsample2x, tile_index
from .layers import LayerNorm, Linear, TwoLayerMlp
from .transformer import AttentionPool, MultiHeadSelfAttention, TransformerBlock

__all__ = [
    "Module",
    "Parameter",
    "Linear",
    "TwoLayerMlp",
    "LayerNorm",
    "Conv2d",
    "Upsample2x",
    "tile_index",
    "MultiHeadSelfAttention",
    "TransformerBlock",
    "AttentionPool",
]
