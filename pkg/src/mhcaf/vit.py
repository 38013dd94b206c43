"""Global-feature branch: patch embedding and a pre-norm transformer encoder.

:class:`MultiHeadAttention` and :func:`patch_embed` are shared with the
Conformer branch and the fusion module.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .nn import Dropout, LayerNorm, Linear, Module, Parameter, trunc_normal
from .tensor import ShapeError, Tensor, gelu, mean, reshape, transpose


def patchify(x, patch: int) -> Tensor:
    """``[B, H, W, C]`` -> ``[B, N, patch*patch*C]``; patches row-major, pixels (row, col, channel)."""
    b, h, w, c = x.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} is not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    t = reshape(x, (b, gh, patch, gw, patch, c))
    t = transpose(t, (0, 1, 3, 2, 4, 5))
    return reshape(t, (b, gh * gw, patch * patch * c))


def patch_embed(x, e, b, e_pos, patch: int = 16) -> Tensor:
    """Token sequence ``Z0 = patches @ E + b + E_pos``."""
    return ops.linear(patchify(x, patch), e, b) + e_pos


def ffn(x, w1, b1, w2, b2) -> Tensor:
    """Two-layer feed-forward with exact GELU."""
    return ops.linear(gelu(ops.linear(x, w1, b1)), w2, b2)


def mhsa(z, wq, wk, wv, wo, heads: int = 4) -> Tensor:
    return ops.multi_head_attention(z, z, wq, wk, wv, wo, heads)


class PatchEmbed(Module):
    def __init__(self, image_size: int, patch: int, d: int, rng: np.random.Generator, channels: int = 3):
        super().__init__()
        if image_size % patch:
            raise ShapeError(f"image size {image_size} is not divisible by patch size {patch}")
        self.patch = patch
        self.n_tokens = (image_size // patch) ** 2
        self.w = Parameter(trunc_normal(rng, (patch * patch * channels, d)))
        self.b = Parameter(np.zeros(d))
        self.pos = Parameter(trunc_normal(rng, (self.n_tokens, d)))

    def forward(self, x):
        return patch_embed(x, self.w, self.b, self.pos, self.patch)


class MultiHeadAttention(Module):
    """``heads`` even splits of width ``d``; no biases, as in ``Q = Z W_Q``."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, std: float = 0.02):
        super().__init__()
        if heads < 1 or d % heads:
            raise ops.ConfigError(f"{heads} heads do not evenly split width {d}")
        self.heads = heads
        self.wq = Parameter(trunc_normal(rng, (d, d), std))
        self.wk = Parameter(trunc_normal(rng, (d, d), std))
        self.wv = Parameter(trunc_normal(rng, (d, d), std))
        self.wo = Parameter(trunc_normal(rng, (d, d), std))

    def forward(self, xq, xkv=None, return_weights: bool = False):
        xkv = xq if xkv is None else xkv
        return ops.multi_head_attention(xq, xkv, self.wq, self.wk, self.wv, self.wo, self.heads, return_weights)


class FeedForward(Module):
    def __init__(self, d: int, d_ff: int, rng: np.random.Generator):
        super().__init__()
        self.w1 = Parameter(trunc_normal(rng, (d, d_ff)))
        self.b1 = Parameter(np.zeros(d_ff))
        self.w2 = Parameter(trunc_normal(rng, (d_ff, d)))
        self.b2 = Parameter(np.zeros(d))

    def forward(self, x):
        return ffn(x, self.w1, self.b1, self.w2, self.b2)


class EncoderBlock(Module):
    """Pre-norm: ``x + MHSA(LN x)`` then ``x + FFN(LN x)``."""

    def __init__(self, d: int, heads: int, d_ff: int, rng: np.random.Generator):
        super().__init__()
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.ffn = FeedForward(d, d_ff, rng)

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.ffn(self.ln2(x))


class ViTBranch(Module):
    """Image -> ``[B, feat_dim]`` via patch tokens, encoder blocks, token GAP and projection."""

    def __init__(self, cfg, rng: np.random.Generator):
        super().__init__()
        self.embed = PatchEmbed(cfg.image_size, cfg.patch, cfg.embed_dim, rng)
        self.depth = cfg.vit_depth
        for i in range(cfg.vit_depth):
            setattr(self, f"block{i}", EncoderBlock(cfg.embed_dim, cfg.heads, cfg.vit_ff, rng))
        self.drop = Dropout(cfg.vit_dropout)
        self.proj = Linear(cfg.embed_dim, cfg.feat_dim, rng)

    def forward(self, x):
        z = self.embed(x)
        for i in range(self.depth):
            z = getattr(self, f"block{i}")(z)
        return self.proj(self.drop(mean(z, axis=1)))
