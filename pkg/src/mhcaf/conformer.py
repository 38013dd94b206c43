"""Hybrid branch: Macaron-style Conformer blocks over patch tokens.

Block order is half-step FFN, MHSA, convolution module, half-step FFN, each
wrapped as ``x + f(LN(x))``, followed by a closing LayerNorm.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .nn import BatchNorm, Dropout, LayerNorm, Linear, Module, Parameter, he_normal, trunc_normal
from .tensor import Tensor, gelu, mean, swish
from .vit import MultiHeadAttention, PatchEmbed


def macaron_ffn_half(x, w_a, b_a, w_b, b_b, residual=None) -> Tensor:
    """``residual + 0.5 * (Swish(x W_a + b_a) W_b + b_b)``; residual defaults to ``x``."""
    inner = ops.linear(swish(ops.linear(x, w_a, b_a)), w_b, b_b)
    return (x if residual is None else residual) + inner * 0.5


def conformer_conv_module(x, pw1_w, pw1_b, dw_w, dw_b, bn: BatchNorm, pw2_w, pw2_b, residual=None) -> Tensor:
    """Pointwise d->2d, GELU, depthwise along tokens, BatchNorm, Swish, pointwise 2d->d, residual.

    The 2d-wide gate is used whole (no GLU split).
    """
    gate = gelu(ops.linear(x, pw1_w, pw1_b))
    y = ops.depthwise_conv1d(gate, dw_w, dw_b)
    y = ops.linear(swish(bn(y)), pw2_w, pw2_b)
    return (x if residual is None else residual) + y


class MacaronFFN(Module):
    def __init__(self, d: int, d_ff: int, rng: np.random.Generator):
        super().__init__()
        self.norm = LayerNorm(d)
        self.w1 = Parameter(trunc_normal(rng, (d, d_ff)))
        self.b1 = Parameter(np.zeros(d_ff))
        self.w2 = Parameter(trunc_normal(rng, (d_ff, d)))
        self.b2 = Parameter(np.zeros(d))

    def forward(self, x):
        return macaron_ffn_half(self.norm(x), self.w1, self.b1, self.w2, self.b2, residual=x)


class ConvModule(Module):
    def __init__(self, d: int, kernel: int, rng: np.random.Generator, momentum: float = 0.1):
        super().__init__()
        if kernel % 2 == 0:
            raise ops.ConfigError(f"depthwise kernel width must be odd, got {kernel}")
        self.norm = LayerNorm(d)
        self.pw1_w = Parameter(trunc_normal(rng, (d, 2 * d)))
        self.pw1_b = Parameter(np.zeros(2 * d))
        self.dw_w = Parameter(he_normal(rng, (kernel, 2 * d), kernel))
        self.dw_b = Parameter(np.zeros(2 * d))
        self.bn = BatchNorm(2 * d, momentum=momentum)
        self.pw2_w = Parameter(trunc_normal(rng, (2 * d, d)))
        self.pw2_b = Parameter(np.zeros(d))

    def forward(self, x):
        return conformer_conv_module(
            self.norm(x), self.pw1_w, self.pw1_b, self.dw_w, self.dw_b, self.bn, self.pw2_w, self.pw2_b, residual=x
        )


class ConformerBlock(Module):
    def __init__(self, d: int, heads: int, d_ff: int, kernel: int, rng: np.random.Generator, momentum: float = 0.1):
        super().__init__()
        self.ffn1 = MacaronFFN(d, d_ff, rng)
        self.attn_norm = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)
        self.conv = ConvModule(d, kernel, rng, momentum)
        self.ffn2 = MacaronFFN(d, d_ff, rng)
        self.out_norm = LayerNorm(d)

    def forward(self, x):
        x = self.ffn1(x)
        x = x + self.attn(self.attn_norm(x))
        x = self.conv(x)
        x = self.ffn2(x)
        return self.out_norm(x)


class ConformerBranch(Module):
    def __init__(self, cfg, rng: np.random.Generator):
        super().__init__()
        self.embed = PatchEmbed(cfg.image_size, cfg.patch, cfg.embed_dim, rng)
        self.depth = cfg.conf_depth
        for i in range(cfg.conf_depth):
            setattr(
                self,
                f"block{i}",
                ConformerBlock(cfg.embed_dim, cfg.heads, cfg.conf_ff, cfg.conf_kernel, rng, cfg.bn_momentum),
            )
        self.drop = Dropout(cfg.conf_dropout)
        self.proj = Linear(cfg.embed_dim, cfg.feat_dim, rng)

    def forward(self, x):
        z = self.embed(x)
        for i in range(self.depth):
            z = getattr(self, f"block{i}")(z)
        return self.proj(self.drop(mean(z, axis=1)))
