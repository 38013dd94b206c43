"""Differentiable neural-network primitives built on :mod:`mhcaf.tensor`.

Layout convention is channels-last everywhere: images are ``[B, H, W, C]``,
token sequences ``[B, N, d]``.  Conv kernels are ``[kh, kw, Cin/groups, Cout]``
and use cross-correlation (no flip).
"""

from __future__ import annotations

import math

import numpy as np

from . import _kernels
from .tensor import (
    ShapeError,
    Tensor,
    _make,
    as_tensor,
    clip_min,
    log,
    matmul,
    mul,
    reshape,
    swapaxes,
    transpose,
    tsum,
)


class ConfigError(ValueError):
    """Invalid layer or op configuration."""


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv_output_size(h: int, w: int, kh: int, kw: int, stride: int, padding) -> tuple[int, int]:
    ph, pw = _pair(padding)
    return (h + 2 * ph - kh) // stride + 1, (w + 2 * pw - kw) // stride + 1


def conv2d(x, k, bias=None, stride: int = 1, padding=0, groups: int = 1) -> Tensor:
    """2-D cross-correlation over NHWC input.

    ``groups == Cin`` with a ``[kh, kw, 1, Cin]`` kernel is the depthwise case.
    A 3-D input ``[H, W, C]`` is treated as a batch of one and returned 3-D.
    """
    x, k = as_tensor(x), as_tensor(k)
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeError(f"conv2d expects [B,H,W,C] input and 4-D kernel, got {x.shape}, {k.shape}")
    b, h, w, cin = x.shape
    kh, kw, kin, cout = k.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ConfigError(f"channels (in={cin}, out={cout}) not divisible by groups={groups}")
    if kin != cin // groups:
        raise ShapeError(f"kernel expects {kin} input channels per group, input gives {cin // groups}")
    ph, pw = _pair(padding)
    ho, wo = conv_output_size(h, w, kh, kw, stride, (ph, pw))
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d output would be {ho}x{wo} for input {h}x{w}, kernel {kh}x{kw}")

    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d bias must have shape ({cout},), got {bias.shape}")
    if kh == 1 and kw == 1 and stride == 1 and ph == 0 and pw == 0 and groups == 1:
        out = _pointwise(x, k, bias)
    elif groups == cin and cout == cin:
        out = _depthwise(x, k, bias, stride, ph, pw, ho, wo)
    else:
        out = _grouped(x, k, bias, stride, ph, pw, ho, wo, groups)
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


def _biased(out: np.ndarray, x: Tensor, k: Tensor, bias, bw):
    """Adds ``bias`` to the freshly computed ``out`` in place and records the node."""
    if bias is None:
        return _make(out, (x, k), bw)
    out += bias.data

    def bw_b(g):
        gx, gk = bw(g)
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias.requires_grad else None
        return gx, gk, gb

    return _make(out, (x, k, bias), bw_b)


def _pointwise(x: Tensor, k: Tensor, bias) -> Tensor:
    b, h, w, cin = x.shape
    cout = k.shape[3]
    x2 = x.data.reshape(-1, cin)
    k2 = k.data.reshape(cin, cout)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gx = (g2 @ k2.T).reshape(x.shape) if x.requires_grad else None
        gk = (x2.T @ g2).reshape(k.shape) if k.requires_grad else None
        return gx, gk

    return _biased((x2 @ k2).reshape(b, h, w, cout), x, k, bias, bw)


def _pad(xd, ph, pw):
    if ph == 0 and pw == 0:
        return xd
    return np.pad(xd, ((0, 0), (ph, ph), (pw, pw), (0, 0)))


def _depthwise(x: Tensor, k: Tensor, bias, stride, ph, pw, ho, wo) -> Tensor:
    h, w = x.shape[1], x.shape[2]
    xp = _pad(x.data, ph, pw)
    kk = k.data[:, :, 0, :]
    out = _kernels.depthwise_forward(xp, kk, stride, ho, wo)

    def bw(g):
        dxp, dk = _kernels.depthwise_backward(xp, kk, np.ascontiguousarray(g), stride)
        gx = dxp[:, ph : ph + h, pw : pw + w, :] if x.requires_grad else None
        gk = dk[:, :, None, :] if k.requires_grad else None
        return gx, gk

    return _biased(out, x, k, bias, bw)


def _grouped(x: Tensor, k: Tensor, bias, stride, ph, pw, ho, wo, groups) -> Tensor:
    b, h, w, cin = x.shape
    kh, kw, kin, cout = k.shape
    gout = cout // groups
    xp = _pad(x.data, ph, pw)
    cols, outs = [], []
    for gi in range(groups):
        xs = xp if groups == 1 else np.ascontiguousarray(xp[..., gi * kin : (gi + 1) * kin])
        c = _kernels.im2col(xs, kh, kw, stride, ho, wo)
        kg = k.data[..., gi * gout : (gi + 1) * gout].reshape(kh * kw * kin, gout)
        cols.append(c)
        outs.append(c @ kg)
    out = (outs[0] if groups == 1 else np.concatenate(outs, axis=1)).reshape(b, ho, wo, cout)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gxp = np.zeros(xp.shape, dtype=xp.dtype) if x.requires_grad else None
        gk = np.zeros(k.shape, dtype=k.dtype) if k.requires_grad else None
        for gi in range(groups):
            gg = g2[:, gi * gout : (gi + 1) * gout]
            if gk is not None:
                gk[..., gi * gout : (gi + 1) * gout] = (cols[gi].T @ gg).reshape(kh, kw, kin, gout)
            if gxp is not None:
                kg = k.data[..., gi * gout : (gi + 1) * gout].reshape(kh * kw * kin, gout)
                dcol = gg @ kg.T
                shape = (b, xp.shape[1], xp.shape[2], kin)
                gxp[..., gi * kin : (gi + 1) * kin] += _kernels.col2im(dcol, shape, kh, kw, stride, ho, wo)
        gx = gxp[:, ph : ph + h, pw : pw + w, :] if gxp is not None else None
        return gx, gk

    return _biased(out, x, k, bias, bw)


def depthwise_conv1d(x, k, bias=None) -> Tensor:
    """Same-padded per-channel 1-D convolution along the token axis.

    ``x`` is ``[B, N, C]``, ``k`` is ``[width, C]`` with odd width.
    """
    x, k = as_tensor(x), as_tensor(k)
    width, c = k.shape
    if width % 2 == 0:
        raise ConfigError(f"depthwise kernel width must be odd, got {width}")
    b, n, _ = x.shape
    y = conv2d(
        reshape(x, (b, 1, n, c)), reshape(k, (1, width, 1, c)), bias, stride=1, padding=(0, width // 2), groups=c
    )
    return reshape(y, (b, n, c))


# ---------------------------------------------------------------------------
# dense layers and normalization
# ---------------------------------------------------------------------------


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` with the bias add fused into the product's output buffer."""
    x, w = as_tensor(x), as_tensor(w)
    if b is None or w.ndim != 2 or x.ndim < 2:
        y = matmul(x, w)
        return y + b if b is not None else y
    b = as_tensor(b)
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: x {x.shape}, w {w.shape}, b {b.shape} are incompatible")
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    out += b.data

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _make(out.reshape(x.shape[:-1] + (w.shape[1],)), (x, w, b), bw)


def softmax(x, axis: int = -1) -> Tensor:
    """Row-max stabilized softmax."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis then apply ``gamma * xhat + beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    d = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / d)
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, ggamma, gbeta

    return _make(xhat * gd + beta.data, (x, gamma, beta), bw)


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over every axis but the last (channel) axis.

    In training mode the batch statistics normalize the input and the running
    buffers are updated in place: ``r <- (1 - momentum) * r + momentum * stat``
    with the population (biased) batch variance.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    c = xd.shape[-1]
    flat = xd.reshape(-1, c)
    m = flat.shape[0]
    if training:
        if m < 2:
            raise ValueError("batch_norm in training mode needs at least 2 values per channel")
        mu = flat.mean(axis=0)
        xc = xd - mu
        v = (xc.reshape(-1, c) ** 2).mean(axis=0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * v
    else:
        mu, v = running_mean, running_var
        xc = xd - mu
    inv = 1.0 / np.sqrt(v + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        g2 = g.reshape(-1, c)
        gx = ggamma = gbeta = None
        if x.requires_grad:
            gh = g * gd
            if training:
                gh2 = gh.reshape(-1, c)
                xh2 = xhat.reshape(-1, c)
                gx = inv * (gh - gh2.mean(axis=0) - xhat * (gh2 * xh2).mean(axis=0))
            else:
                gx = gh * inv
        if gamma.requires_grad:
            ggamma = (g2 * xhat.reshape(-1, c)).sum(axis=0)
        if beta.requires_grad:
            gbeta = g2.sum(axis=0)
        return gx, ggamma, gbeta

    return _make(xhat * gd + beta.data, (x, gamma, beta), bw)


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: kept units are scaled by ``1 / (1 - p)`` at train time."""
    x = as_tensor(x)
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def scaled_dot_attention(q, k, v, return_weights: bool = False):
    """softmax(q k^T / sqrt(dk)) v over the last two axes."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query/key widths differ: {q.shape} vs {k.shape}")
    scores = matmul(q, swapaxes(k, -1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    weights = softmax(scores, axis=-1)
    out = matmul(weights, v)
    return (out, weights) if return_weights else out


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return transpose(reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, dk = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, n, h * dk))


def multi_head_attention(xq, xkv, wq, wk, wv, wo, heads: int, return_weights: bool = False):
    """Concat of ``heads`` scaled-dot heads over ``[B, N, d]`` sequences, projected by ``wo``.

    Head ``i`` owns columns ``i*dk:(i+1)*dk`` of ``wq``, ``wk`` and ``wv``.
    """
    xq, xkv = as_tensor(xq), as_tensor(xkv)
    d = wq.shape[1]
    if heads < 1 or d % heads:
        raise ConfigError(f"{heads} heads do not evenly split width {d}")
    q = split_heads(matmul(xq, wq), heads)
    k = split_heads(matmul(xkv, wk), heads)
    v = split_heads(matmul(xkv, wv), heads)
    att, weights = scaled_dot_attention(q, k, v, return_weights=True)
    out = matmul(merge_heads(att), wo)
    return (out, weights) if return_weights else out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

PROB_FLOOR = 1e-12


def cross_entropy(yhat, y_onehot, class_weight=1.0) -> Tensor:
    """Weighted categorical cross-entropy on probabilities.

    For a single ``[C]`` vector this is ``-w * log(max(p_true, 1e-12))``.  For
    a ``[B, C]`` batch with per-sample weights ``w`` it is the weighted mean
    ``sum(w_i * l_i) / sum(w_i)``.
    """
    yhat = as_tensor(yhat)
    onehot = np.asarray(y_onehot.data if isinstance(y_onehot, Tensor) else y_onehot, dtype=yhat.dtype)
    if onehot.shape != yhat.shape:
        raise ShapeError(f"one-hot shape {onehot.shape} does not match predictions {yhat.shape}")
    if not (np.all((onehot == 0) | (onehot == 1)) and np.all(onehot.sum(axis=-1) == 1)):
        raise ValueError("labels must be one-hot with exactly one 1 per row")
    p_true = tsum(mul(yhat, onehot), axis=-1)
    nll = -log(clip_min(p_true, PROB_FLOOR))
    w = np.broadcast_to(np.asarray(class_weight, dtype=yhat.dtype), nll.shape)
    if nll.ndim == 0:
        return nll * w
    return tsum(nll * w) * (1.0 / w.sum())


def softmax_cross_entropy(logits, labels, class_weights=None) -> Tensor:
    """Fused softmax + weighted cross-entropy over a ``[B, C]`` batch.

    Matches ``cross_entropy(softmax(logits), onehot, w[labels])`` including the
    probability floor, but is cheaper and more accurate.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    lp_true = logp[np.arange(b), labels]
    floor = math.log(PROB_FLOOR)
    clamped = lp_true < floor
    w = np.ones(b, dtype=logits.dtype) if class_weights is None else np.asarray(class_weights, dtype=logits.dtype)[labels]
    wsum = w.sum()
    loss = -(w * np.maximum(lp_true, floor)).sum() / wsum

    def bw(g):
        coef = (w * ~clamped / wsum)[:, None] * g
        grad = np.exp(logp) * coef
        grad[np.arange(b), labels] -= coef[:, 0]
        return (grad,)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw)
