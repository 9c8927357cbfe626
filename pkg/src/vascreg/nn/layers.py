"""Layers built on :mod:`vascreg.nn.tensor`.

Parameters are discovered by walking module attributes in definition order,
which keeps checkpoint layouts and optimizer state stable across runs.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import ShapeMismatch
from . import tensor as T
from .tensor import Tensor


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Module:
    """Base class; subclasses set parameters/submodules as attributes."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def spec(self) -> dict:
        """Layer type and hyperparameters, for checkpoint headers."""
        return {"type": type(self).__name__}


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.n_in, self.n_out = n_in, n_out
        self.weight = glorot(rng, (n_in, n_out), n_in, n_out)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)

    def forward(self, x):
        x = T.as_tensor(x)
        if x.shape[-1] != self.n_in:
            raise ShapeMismatch(f"Dense expects last dim {self.n_in}, got {x.shape}")
        return x @ self.weight + self.bias

    def spec(self):
        return {"type": "Dense", "n_in": self.n_in, "n_out": self.n_out}


class Conv1D(Module):
    """'Same'-padded stride-1 convolution over (batch, channels, length)."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator):
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        self.weight = glorot(rng, (c_out, c_in, kernel), c_in * kernel, c_out * kernel)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)

    def forward(self, x):
        x = T.as_tensor(x)
        if x.ndim != 3 or x.shape[1] != self.c_in:
            raise ShapeMismatch(f"Conv1D expects (B, {self.c_in}, L), got {x.shape}")
        return T.conv1d(x, self.weight, self.bias)

    def spec(self):
        return {"type": "Conv1D", "c_in": self.c_in, "c_out": self.c_out, "kernel": self.kernel}


class ReLU(Module):
    def forward(self, x):
        return T.relu(x)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.dim, self.eps = dim, eps
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def forward(self, x):
        x = T.as_tensor(x)
        if x.shape[-1] != self.dim:
            raise ShapeMismatch(f"LayerNorm expects last dim {self.dim}, got {x.shape}")
        return T.layer_norm(x, self.gamma, self.beta, self.eps)

    def spec(self):
        return {"type": "LayerNorm", "dim": self.dim}


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator):
        self.n, self.dim = n, dim
        self.weight = Tensor(rng.normal(0.0, 0.02, size=(n, dim)), requires_grad=True)

    def forward(self, idx):
        idx = np.asarray(idx)
        if idx.size and (idx.min() < 0 or idx.max() >= self.n):
            raise ShapeMismatch(f"embedding index out of range [0, {self.n})")
        return T.embedding(self.weight, idx)

    def spec(self):
        return {"type": "Embedding", "n": self.n, "dim": self.dim}


class MultiHeadSelfAttention(Module):
    """Scaled dot-product self-attention over (batch, tokens, dim)."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ShapeMismatch(f"dim {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.q = Dense(dim, dim, rng)
        self.k = Dense(dim, dim, rng)
        self.v = Dense(dim, dim, rng)
        self.o = Dense(dim, dim, rng)
        self.last_attention = None

    def _split(self, x, B, N):
        dh = self.dim // self.heads
        return x.reshape(B, N, self.heads, dh).transpose(0, 2, 1, 3)

    def forward(self, x):
        x = T.as_tensor(x)
        if x.ndim != 3 or x.shape[-1] != self.dim:
            raise ShapeMismatch(f"attention expects (B, N, {self.dim}), got {x.shape}")
        B, N, _ = x.shape
        q, k, v = (self._split(f(x), B, N) for f in (self.q, self.k, self.v))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(self.dim // self.heads))
        attn = T.softmax(scores, axis=-1)
        self.last_attention = attn.data
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(B, N, self.dim)
        return self.o(out)

    def spec(self):
        return {"type": "MultiHeadSelfAttention", "dim": self.dim, "heads": self.heads}


class TransformerBlock(Module):
    """Pre-norm encoder block: attention and a two-layer ReLU feed-forward, both residual."""

    def __init__(self, dim: int, heads: int, hidden: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ff1 = Dense(dim, hidden, rng)
        self.ff2 = Dense(hidden, dim, rng)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ff2(T.relu(self.ff1(self.norm2(x))))

    def spec(self):
        return {"type": "TransformerBlock", "dim": self.attn.dim, "heads": self.attn.heads,
                "hidden": self.ff1.n_out}


class MLP(Module):
    """Dense stack with ReLU between layers (none after the last)."""

    def __init__(self, widths, rng: np.random.Generator):
        self.widths = list(widths)
        self.layers = [Dense(a, b, rng) for a, b in zip(self.widths[:-1], self.widths[1:])]

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x

    def spec(self):
        return {"type": "MLP", "widths": self.widths}
