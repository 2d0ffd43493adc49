"""Transformer encoder over time with a linear positional ramp."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff.nn import LayerNorm, Linear, Module


@dataclass(frozen=True)
class EncoderConfig:
    model_dim: int = 64
    layers: int = 3
    heads: int = 4
    ff_dim: int = 1024

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by {self.heads} heads")


def positional_ramp(num_frames: int) -> np.ndarray:
    """``(k - 1) / (K - 1)`` for k = 1..K."""
    if num_frames < 2:
        raise ValueError("the positional ramp needs at least two frames")
    return np.arange(num_frames) / (num_frames - 1)


def positional_concat(z: ad.Tensor) -> ad.Tensor:
    """Append the ramp as one extra feature: (B, K, N, D) -> (B, K, N, D + 1).

    A 3-D (K, N, D) input is accepted as well.
    """
    time_axis = z.ndim - 3
    K = z.shape[time_axis]
    ramp = positional_ramp(K).astype(z.dtype)
    shape = [1] * z.ndim
    shape[time_axis] = K
    pos = np.broadcast_to(ramp.reshape(shape), (*z.shape[:-1], 1))
    return ad.concat([z, ad.Tensor(np.ascontiguousarray(pos))], axis=-1)


class SelfAttention(Module):
    """Multi-head scaled dot-product self-attention without masking."""

    def __init__(self, dim: int, heads: int, dtype=np.float32):
        super().__init__()
        self.heads = heads
        self.query = Linear(dim, dim, bias=False, dtype=dtype)
        self.key = Linear(dim, dim, bias=False, dtype=dtype)
        self.value = Linear(dim, dim, bias=False, dtype=dtype)
        self.output = Linear(dim, dim, bias=False, dtype=dtype)

    def _split(self, x: ad.Tensor) -> ad.Tensor:
        S, K, D = x.shape
        return ad.transpose(ad.reshape(x, (S, K, self.heads, D // self.heads)), (0, 2, 1, 3))

    def __call__(self, x: ad.Tensor, return_weights: bool = False):
        S, K, D = x.shape
        q = self._split(self.query(x))
        k = self._split(self.key(x))
        v = self._split(self.value(x))
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(D // self.heads))
        weights = ad.softmax(scores, axis=-1)
        mixed = ad.reshape(ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)), (S, K, D))
        out = self.output(mixed)
        return (out, weights) if return_weights else out


class EncoderBlock(Module):
    """Post-norm block: attention, add & norm, ReLU feed-forward, add & norm."""

    def __init__(self, config: EncoderConfig, dtype=np.float32):
        super().__init__()
        self.attention = SelfAttention(config.model_dim, config.heads, dtype)
        self.norm1 = LayerNorm(config.model_dim, dtype=dtype)
        self.ff_in = Linear(config.model_dim, config.ff_dim, dtype=dtype)
        self.ff_out = Linear(config.ff_dim, config.model_dim, dtype=dtype)
        self.norm2 = LayerNorm(config.model_dim, dtype=dtype)

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        x = self.norm1(x + self.attention(x))
        return self.norm2(x + self.ff_out(ad.relu(self.ff_in(x))))


class TemporalEncoder(Module):
    """Encode each source's feature sequence independently over time."""

    def __init__(self, config: EncoderConfig, dtype=np.float32):
        super().__init__()
        self.config = config
        self.blocks = [EncoderBlock(config, dtype) for _ in range(config.layers)]

    def encode_sequences(self, x: ad.Tensor) -> ad.Tensor:
        """(S, K, D) sequences -> (S, K, D)."""
        for block in self.blocks:
            x = block(x)
        return x

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        """(B, K, N, D_E) -> (B, K, N, D_E); a 3-D (K, N, D_E) input is also accepted."""
        squeeze = x.ndim == 3
        if squeeze:
            x = ad.reshape(x, (1, *x.shape))
        if x.ndim != 4 or x.shape[-1] != self.config.model_dim:
            raise ad.ShapeError(f"encoder expects (B, K, N, {self.config.model_dim}), got {x.shape}")
        B, K, N, D = x.shape
        seq = ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (B * N, K, D))
        out = ad.transpose(ad.reshape(self.encode_sequences(seq), (B, N, K, D)), (0, 2, 1, 3))
        return ad.reshape(out, (K, N, D)) if squeeze else out
