"""Multi-head cross-attention fusion of the three branch features.

Each interaction is ``LN(f_q + Attention(f_q W_Q, f_kv W_K, f_kv W_V))``.
In the default ``single`` token mode each 512-vector is a length-1 sequence,
so the softmax over one key is exactly 1 and the attention term is the
value path of ``f_kv``.  ``reshaped`` mode views the projected vectors as
``tokens`` tokens of width ``F / tokens`` instead; parameters are shared
between the modes.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .nn import BatchNorm, LayerNorm, Linear, Module, Parameter, trunc_normal
from .tensor import ShapeError, Tensor, concat, matmul, relu, reshape

PAIRS = (("vit", "eff"), ("eff", "conf"), ("conf", "vit"))


def cross_attend(f_q, f_kv, wq, wk, wv, wo, gamma, beta, heads: int = 4, tokens: int = 1, return_weights=False):
    """One directed interaction on ``[B, F]`` features; returns ``[B, F]``."""
    if f_q.shape != f_kv.shape:
        raise ShapeError(f"feature shapes differ: {f_q.shape} vs {f_kv.shape}")
    b, f = f_q.shape
    if f % tokens or (f // tokens) % heads:
        raise ops.ConfigError(f"width {f} cannot be split into {tokens} tokens of {heads} heads")
    t = f // tokens

    def seq(v):
        return ops.split_heads(reshape(v, (b, tokens, t)), heads)

    att, weights = ops.scaled_dot_attention(
        seq(matmul(f_q, wq)), seq(matmul(f_kv, wk)), seq(matmul(f_kv, wv)), return_weights=True
    )
    mixed = matmul(reshape(ops.merge_heads(att), (b, f)), wo)
    out = ops.layer_norm(f_q + mixed, gamma, beta)
    return (out, weights) if return_weights else out


class CrossAttention(Module):
    def __init__(self, f: int, heads: int, rng: np.random.Generator, tokens: int = 1):
        super().__init__()
        self.heads = heads
        self.tokens = tokens
        self.wq = Parameter(trunc_normal(rng, (f, f)))
        self.wk = Parameter(trunc_normal(rng, (f, f)))
        self.wv = Parameter(trunc_normal(rng, (f, f)))
        self.wo = Parameter(trunc_normal(rng, (f, f)))
        self.ln = LayerNorm(f)

    def forward(self, f_q, f_kv, return_weights=False):
        return cross_attend(
            f_q, f_kv, self.wq, self.wk, self.wv, self.wo, self.ln.gamma, self.ln.beta,
            self.heads, self.tokens, return_weights,
        )


class BranchNorms(Module):
    def __init__(self, f: int, momentum: float):
        super().__init__()
        self.eff = BatchNorm(f, momentum)
        self.vit = BatchNorm(f, momentum)
        self.conf = BatchNorm(f, momentum)


class Fusion(Module):
    """``(f_eff, f_vit, f_conf)`` -> ``ReLU(W_f [MHA1 | MHA2 | MHA3] + b_f)``."""

    def __init__(self, f: int, fusion_cfg, rng: np.random.Generator, momentum: float = 0.1):
        super().__init__()
        tokens = 1 if fusion_cfg.token_mode == "single" else fusion_cfg.tokens
        if fusion_cfg.token_mode not in ("single", "reshaped"):
            raise ops.ConfigError(f"unknown token mode {fusion_cfg.token_mode!r}")
        self.width = f
        self.bn = BranchNorms(f, momentum)
        self.mha1 = CrossAttention(f, fusion_cfg.heads, rng, tokens)
        self.mha2 = CrossAttention(f, fusion_cfg.heads, rng, tokens)
        self.mha3 = CrossAttention(f, fusion_cfg.heads, rng, tokens)
        self.dense = Linear(3 * f, f, rng)

    def forward(self, f_eff, f_vit, f_conf, capture: dict | None = None) -> Tensor:
        for name, v in (("eff", f_eff), ("vit", f_vit), ("conf", f_conf)):
            if v.ndim != 2 or v.shape[1] != self.width:
                raise ShapeError(f"branch feature {name} must be [B, {self.width}], got {v.shape}")
        feats = {"eff": self.bn.eff(f_eff), "vit": self.bn.vit(f_vit), "conf": self.bn.conf(f_conf)}
        mhas = [
            mod(feats[q], feats[kv]) for mod, (q, kv) in zip((self.mha1, self.mha2, self.mha3), PAIRS)
        ]
        cat = concat(mhas, axis=-1)
        if capture is not None:
            capture["fusion.concat"] = cat
        return relu(self.dense(cat))
