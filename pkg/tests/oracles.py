"""Brute-force reference implementations used only by the tests.

Every function here is written with explicit loops over plain numpy arrays
and shares no code with the package.
"""

from __future__ import annotations

import math

import numpy as np


def conv2d(x, k, bias=None, stride=1, padding=0, groups=1):
    """Direct NHWC cross-correlation; ``x`` is ``[B, H, W, Cin]``."""
    b, h, w, cin = x.shape
    kh, kw, kin, cout = k.shape
    ph, pw = (padding, padding) if np.isscalar(padding) else padding
    xp = np.zeros((b, h + 2 * ph, w + 2 * pw, cin))
    xp[:, ph : ph + h, pw : pw + w] = x
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (w + 2 * pw - kw) // stride + 1
    out = np.zeros((b, ho, wo, cout))
    cpg_out = cout // groups
    for n in range(b):
        for i in range(ho):
            for j in range(wo):
                for o in range(cout):
                    g = o // cpg_out
                    s = 0.0
                    for u in range(kh):
                        for v in range(kw):
                            for c in range(kin):
                                s += xp[n, i * stride + u, j * stride + v, g * kin + c] * k[u, v, c, o]
                    out[n, i, j, o] = s + (0.0 if bias is None else bias[o])
    return out


def min_filter(img, size):
    """Min over a ``size x size`` window, out-of-range cells ignored."""
    h, w = img.shape[:2]
    r = size // 2
    out = np.empty_like(img)
    for y in range(h):
        for x in range(w):
            out[y, x] = img[max(0, y - r) : y + r + 1, max(0, x - r) : x + r + 1].min(axis=(0, 1))
    return out


def bilinear_resize(img, out_h, out_w):
    """Corner-aligned bilinear resize, per pixel, rounded half-to-even into uint8."""
    h, w = img.shape[:2]
    src = img.astype(np.float64)
    out = np.empty((out_h, out_w) + img.shape[2:], dtype=np.float64)
    for i in range(out_h):
        y = (h - 1) / 2.0 if out_h == 1 else i * (h - 1) / (out_h - 1)
        y0 = int(math.floor(y))
        y1 = min(y0 + 1, h - 1)
        fy = y - y0
        for j in range(out_w):
            x = (w - 1) / 2.0 if out_w == 1 else j * (w - 1) / (out_w - 1)
            x0 = int(math.floor(x))
            x1 = min(x0 + 1, w - 1)
            fx = x - x0
            top = src[y0, x0] * (1 - fx) + src[y0, x1] * fx
            bot = src[y1, x0] * (1 - fx) + src[y1, x1] * fx
            out[i, j] = top * (1 - fy) + bot * fy
    return out


def mcc(y_true, y_pred, n):
    """Multiclass MCC via covariances of one-hot indicator matrices."""
    yt = np.eye(n)[y_true]
    yp = np.eye(n)[y_pred]
    yt = yt - yt.mean(axis=0)
    yp = yp - yp.mean(axis=0)
    cov_tp = float((yt * yp).sum())
    cov_tt = float((yt * yt).sum())
    cov_pp = float((yp * yp).sum())
    if cov_tt == 0 or cov_pp == 0:
        return 0.0
    return cov_tp / math.sqrt(cov_tt * cov_pp)


def kappa(y_true, y_pred, n):
    """Cohen's kappa by counting agreements pair by pair."""
    m = len(y_true)
    po = sum(1 for a, b in zip(y_true, y_pred) if a == b) / m
    pe = 0.0
    for c in range(n):
        pe += (sum(1 for a in y_true if a == c) / m) * (sum(1 for b in y_pred if b == c) / m)
    if pe == 1.0:
        return 0.0
    return (po - pe) / (1 - pe)


def auc_pairs(scores, positive):
    """Probability that a random positive outscores a random negative (ties count half)."""
    pos = [s for s, p in zip(scores, positive) if p]
    neg = [s for s, p in zip(scores, positive) if not p]
    wins = 0.0
    for a in pos:
        for b in neg:
            wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return wins / (len(pos) * len(neg))


def macro_auc(y_true, scores):
    vals = []
    for k in range(scores.shape[1]):
        pos = [int(t) == k for t in y_true]
        if all(pos) or not any(pos):
            continue
        vals.append(auc_pairs(scores[:, k], pos))
    return sum(vals) / len(vals)


def random_conv_case(r):
    """A random small conv2d case: dense, depthwise, grouped or pointwise."""
    kind = r.choice(["dense", "depthwise", "grouped", "pointwise"])
    cin = int(r.integers(1, 5))
    if kind == "depthwise":
        groups, cout, kin = cin, cin, 1
    elif kind == "grouped":
        groups = int(r.choice([g for g in (1, 2, 3, 4) if cin % g == 0]))
        cout = groups * int(r.integers(1, 3))
        kin = cin // groups
    else:
        groups, cout, kin = 1, int(r.integers(1, 5)), cin
    kh = kw = 1 if kind == "pointwise" else int(r.integers(1, 4))
    stride = 1 if kind == "pointwise" else int(r.integers(1, 3))
    pad = 0 if kind == "pointwise" else int(r.integers(0, 2))
    h, w = int(r.integers(kh, 8)), int(r.integers(kw, 8))
    x = r.normal(size=(int(r.integers(1, 3)), h, w, cin))
    k = r.normal(size=(kh, kw, kin, cout))
    bias = r.normal(size=cout) if r.random() < 0.5 else None
    return x, k, bias, stride, pad, groups
