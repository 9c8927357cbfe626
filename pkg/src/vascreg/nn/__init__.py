"""Small reverse-mode autodiff engine and the layers the registration model needs."""

from . import tensor as ops
from .checkpoint import load_into, read_checkpoint, save_checkpoint
from .layers import (MLP, Conv1D, Dense, Embedding, LayerNorm, Module,
                     MultiHeadSelfAttention, ReLU, TransformerBlock)
from .optim import Adam, adam_update, clip_grad_norm, grad_norm
from .tensor import Tensor, no_grad

__all__ = [
    "Tensor", "no_grad", "ops",
    "Module", "Dense", "Conv1D", "ReLU", "LayerNorm", "Embedding",
    "MultiHeadSelfAttention", "TransformerBlock", "MLP",
    "Adam", "adam_update", "clip_grad_norm", "grad_norm",
    "save_checkpoint", "read_checkpoint", "load_into",
]
