"""Local-feature branch: convolutional stem of MBConv stages, CBAM, projection.

The stem stands in for a pretrained EfficientNet backbone.  It is trained
from scratch and ends at a 4x4 map for 128x128 input; its stage widths are
configurable (the 1536-wide final stage is reachable but slow).
"""

from __future__ import annotations

import math

import numpy as np

from . import ops
from .nn import Dropout, Linear, Module, Parameter, he_normal, trunc_normal
from .tensor import ShapeError, Tensor, concat, mean, pad2d, relu, reshape, sigmoid, swish, tmax


def mbconv_block(
    x, expand_w, expand_b, dw_w, dw_b, project_w, project_b, stride: int = 1, padding: str = "zero"
) -> Tensor:
    """Inverted bottleneck: 1x1 expand -> Swish -> 3x3 depthwise -> Swish -> 1x1 project.

    ``expand_w`` may be None (expansion ratio 1).  The projection is linear.
    A residual connection is added when the block keeps both stride and width.
    ``padding`` is the depthwise border mode, ``"zero"`` or ``"edge"`` (repeat the border).
    """
    h = x
    if expand_w is not None:
        h = swish(ops.conv2d(h, expand_w, expand_b))
    hidden = h.shape[-1]
    if padding not in ("zero", "edge"):
        raise ValueError(f"unknown padding mode {padding!r}")
    if padding == "edge":
        h = swish(ops.conv2d(pad2d(h, 1, 1, "edge"), dw_w, dw_b, stride=stride, groups=hidden))
    else:
        h = swish(ops.conv2d(h, dw_w, dw_b, stride=stride, padding=1, groups=hidden))
    out = ops.conv2d(h, project_w, project_b)
    if stride == 1 and out.shape[-1] == x.shape[-1]:
        out = out + x
    return out


class MBConv(Module):
    def __init__(
        self, cin: int, cout: int, stride: int, expansion: int, rng: np.random.Generator, padding: str = "zero"
    ):
        super().__init__()
        if expansion < 1:
            raise ValueError("expansion ratio must be >= 1")
        hidden = cin * expansion
        self.stride = stride
        self.padding = padding
        if expansion > 1:
            self.expand_w = Parameter(he_normal(rng, (1, 1, cin, hidden), cin))
            self.expand_b = Parameter(np.zeros(hidden))
        else:
            self.expand_w = self.expand_b = None
        self.dw_w = Parameter(he_normal(rng, (3, 3, 1, hidden), 9))
        self.dw_b = Parameter(np.zeros(hidden))
        self.project_w = Parameter(he_normal(rng, (1, 1, hidden, cout), hidden) * 0.5)
        self.project_b = Parameter(np.zeros(cout))

    def forward(self, x):
        return mbconv_block(
            x, self.expand_w, self.expand_b, self.dw_w, self.dw_b, self.project_w, self.project_b, self.stride,
            self.padding,
        )


class Stem(Module):
    def __init__(self, cfg, rng: np.random.Generator):
        super().__init__()
        w0 = cfg.stem_widths[0]
        k = cfg.stem_conv_kernel
        self.conv_stride = cfg.stem_conv_stride
        self.conv_pad = (k - 1) // 2 if k % 2 else 0
        self.conv_w = Parameter(he_normal(rng, (k, k, 3, w0), k * k * 3))
        self.conv_b = Parameter(np.zeros(w0))
        self.n_stages = len(cfg.stem_widths)
        if len(cfg.stem_strides) != self.n_stages:
            raise ValueError("stem_widths and stem_strides must have equal length")
        cin = w0
        for i, (w, s) in enumerate(zip(cfg.stem_widths, cfg.stem_strides)):
            setattr(self, f"stage{i}", MBConv(cin, w, s, cfg.expansion, rng, cfg.stem_padding))
            cin = w
        self.out_channels = cin

    def forward(self, x, capture: dict | None = None, prefix: str = "cnn.stem"):
        h = swish(ops.conv2d(x, self.conv_w, self.conv_b, stride=self.conv_stride, padding=self.conv_pad))
        if capture is not None:
            capture[f"{prefix}.conv"] = h
        for i in range(self.n_stages):
            h = getattr(self, f"stage{i}")(h)
            if capture is not None:
                capture[f"{prefix}.stage{i}"] = h
        # the stages end in linear projections; the stem output is activated like a backbone's top layer
        h = swish(h)
        if capture is not None:
            capture[f"{prefix}.top"] = h
        return h

    def layer_names(self, prefix: str = "cnn.stem") -> list[str]:
        return [f"{prefix}.conv"] + [f"{prefix}.stage{i}" for i in range(self.n_stages)] + [f"{prefix}.top"]

    def layer_geometry(self, prefix: str = "cnn.stem") -> dict[str, tuple[float, float]]:
        """``name -> (stride, offset)``: cell ``i`` of that map is centred on input pixel ``offset + stride * i``."""
        k = self.conv_w.shape[0]
        stride, offset = float(self.conv_stride), (k - 1) / 2.0 - self.conv_pad
        geo = {f"{prefix}.conv": (stride, offset)}
        for i in range(self.n_stages):
            stride *= getattr(self, f"stage{i}").stride  # 3x3 window with padding 1 keeps centres aligned
            geo[f"{prefix}.stage{i}"] = (stride, offset)
        geo[f"{prefix}.top"] = (stride, offset)
        return geo


# ---------------------------------------------------------------------------
# CBAM
# ---------------------------------------------------------------------------


def _shared_mlp(v, w1, b1, w2, b2):
    return ops.linear(relu(ops.linear(v, w1, b1)), w2, b2)


def channel_attention(f, w1, b1, w2, b2):
    """Returns ``(Mc, Fc)``: ``Mc = sigmoid(MLP(GAP f) + MLP(GMP f))`` as ``[B,1,1,C]``."""
    b, _, _, c = f.shape
    avg = mean(f, axis=(1, 2))
    mx = tmax(f, axis=(1, 2))
    mc = reshape(sigmoid(_shared_mlp(avg, w1, b1, w2, b2) + _shared_mlp(mx, w1, b1, w2, b2)), (b, 1, 1, c))
    return mc, f * mc


def spatial_attention(fc, conv_w, conv_b):
    """Returns ``(Ms, Fout)``: 7x7 conv over [channel-mean ; channel-max] maps."""
    pooled = concat([mean(fc, axis=3, keepdims=True), tmax(fc, axis=3, keepdims=True)], axis=3)
    pad = conv_w.shape[0] // 2
    ms = sigmoid(ops.conv2d(pooled, conv_w, conv_b, padding=pad))
    return ms, fc * ms


class CBAM(Module):
    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 16, kernel: int = 7):
        super().__init__()
        hidden = max(1, math.ceil(channels / reduction))
        self.mlp_w1 = Parameter(trunc_normal(rng, (channels, hidden), math.sqrt(2.0 / channels)))
        self.mlp_b1 = Parameter(np.zeros(hidden))
        self.mlp_w2 = Parameter(trunc_normal(rng, (hidden, channels), math.sqrt(1.0 / hidden)))
        self.mlp_b2 = Parameter(np.zeros(channels))
        self.spatial_w = Parameter(trunc_normal(rng, (kernel, kernel, 2, 1), math.sqrt(1.0 / (2 * kernel * kernel))))
        self.spatial_b = Parameter(np.zeros(1))

    def forward(self, f):
        _, fc = channel_attention(f, self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2)
        _, out = spatial_attention(fc, self.spatial_w, self.spatial_b)
        return out


class CNNBranch(Module):
    """Image ``[B, S, S, 3]`` -> local feature ``[B, feat_dim]``."""

    def __init__(self, cfg, rng: np.random.Generator):
        super().__init__()
        self.image_size = cfg.image_size
        self.stem = Stem(cfg, rng)
        self.cbam = CBAM(self.stem.out_channels, rng, cfg.cbam_reduction, cfg.cbam_kernel)
        self.drop = Dropout(cfg.cnn_dropout)
        self.proj = Linear(self.stem.out_channels, cfg.feat_dim, rng)

    def forward(self, x, capture: dict | None = None):
        if x.ndim != 4 or x.shape[1:] != (self.image_size, self.image_size, 3):
            raise ShapeError(f"CNN branch expects [B,{self.image_size},{self.image_size},3], got {x.shape}")
        fe = self.stem(x, capture)
        fo = self.cbam(fe)
        if capture is not None:
            capture["cnn.cbam"] = fo
        pooled = mean(fo, axis=(1, 2))
        return self.proj(self.drop(pooled))

    def layer_names(self) -> list[str]:
        return self.stem.layer_names() + ["cnn.cbam"]

    def layer_geometry(self) -> dict[str, tuple[float, float]]:
        geo = self.stem.layer_geometry()
        geo["cnn.cbam"] = geo["cnn.stem.top"]
        return geo
