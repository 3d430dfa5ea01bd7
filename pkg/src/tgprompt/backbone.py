"""Sequence backbones mapping an expression matrix to a node embedding.

Both architectures zero the padding rows on entry and read out with a masked
mean, so whatever sits in padded rows cannot reach the output.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .featmatrix import ExpressionMatrix
from .layers import Linear, Module
from .tensor import Tensor


class Backbone(Module):
    width: int
    d_h: int

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    def freeze(self) -> None:
        self.set_trainable(False)

    def unfreeze(self) -> None:
        self.set_trainable(True)

    def forward(self, values, mask: np.ndarray) -> Tensor:
        raise NotImplementedError

    def embed(self, z: ExpressionMatrix) -> Tensor:
        return self.forward(z.values, z.mask)

    def _check(self, values: Tensor, mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
        values = values if isinstance(values, Tensor) else Tensor(values)
        if values.shape[-1] != self.width:
            raise T.ShapeError(f"{type(self).__name__}: input width {values.shape[-1]}, "
                               f"checkpoint expects {self.width}")
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != values.shape[:-1]:
            raise T.ShapeError(f"mask {mask.shape} does not match input {values.shape}")
        return values, mask


class MixerBackbone(Backbone):
    """Token mixing over the neighbor axis, channel mixing over features."""

    def __init__(self, max_neighbors: int, width: int, d_h: int, rng: np.random.Generator,
                 token_expansion: float = 0.5, channel_expansion: float = 4.0):
        self.max_neighbors, self.width, self.d_h = max_neighbors, width, d_h
        tok_h = max(1, int(round(max_neighbors * token_expansion)))
        ch_h = max(1, int(round(width * channel_expansion)))
        self.token1 = Linear(max_neighbors, tok_h, rng)
        self.token2 = Linear(tok_h, max_neighbors, rng)
        self.channel1 = Linear(width, ch_h, rng)
        self.channel2 = Linear(ch_h, width, rng)
        self.out = Linear(width, d_h, rng)

    def forward(self, values, mask) -> Tensor:
        values, mask = self._check(values, mask)
        if values.shape[-2] != self.max_neighbors:
            raise T.ShapeError(f"MixerBackbone expects {self.max_neighbors} rows, "
                               f"got {values.shape[-2]}")
        x = T.mul(values, mask[..., None].astype(np.float64))
        mixed = self.token2(T.relu(self.token1(T.transpose(x))))
        x = T.add(x, T.transpose(mixed))
        x = T.add(x, self.channel2(T.relu(self.channel1(x))))
        return self.out(T.mean_pool(x, mask, axis=-2))


class AttnBackbone(Backbone):
    """Single-head scaled dot-product self-attention over neighbor rows."""

    def __init__(self, width: int, d_h: int, rng: np.random.Generator):
        self.width, self.d_h = width, d_h
        self.query = Linear(width, d_h, rng)
        self.key = Linear(width, d_h, rng)
        self.value = Linear(width, d_h, rng)
        self.proj = Linear(d_h, width, rng)
        self.out = Linear(width, d_h, rng)

    def attention(self, x: Tensor, mask: np.ndarray) -> Tensor:
        q, k = self.query(x), self.key(x)
        scores = T.mul(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(self.d_h))
        return T.masked_softmax(scores, mask[..., None, :])

    def attention_weights(self, values, mask) -> np.ndarray:
        values, mask = self._check(values, mask)
        with T.no_grad():
            x = T.mul(values, mask[..., None].astype(np.float64))
            return self.attention(x, mask).data

    def forward(self, values, mask) -> Tensor:
        values, mask = self._check(values, mask)
        x = T.mul(values, mask[..., None].astype(np.float64))
        attn = self.attention(x, mask)
        x = T.add(x, self.proj(T.matmul(attn, self.value(x))))
        return self.out(T.mean_pool(x, mask, axis=-2))


BACKBONES = ("mixer", "attn")


def make_backbone(kind: str, max_neighbors: int, width: int, d_h: int,
                  rng: np.random.Generator, **kwargs) -> Backbone:
    if kind == "mixer":
        return MixerBackbone(max_neighbors, width, d_h, rng, **kwargs)
    if kind == "attn":
        return AttnBackbone(width, d_h, rng)
    raise ValueError(f"unknown backbone {kind!r}; choose from {BACKBONES}")
