"""Hot numeric kernels with a numba path and a pure-numpy path.

The numba path is used when numba imports cleanly and ``MHCAF_DISABLE_NUMBA``
is unset (or ``0``).  Both paths compute the same quantities; they may differ
in float summation order, never by more than a few ulps.

Kernels are deliberately serial: ``parallel=True`` reorders reductions and
would break bitwise-reproducible training runs.
"""

from __future__ import annotations

import math
import os

import numpy as np
from scipy.special import erf

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

_env_off = os.environ.get("MHCAF_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")
BACKEND = "numba" if (_HAVE_NUMBA and not _env_off) else "numpy"


def set_backend(name: str) -> str:
    """Switch kernel backend at runtime; returns the previous one."""
    global BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not _HAVE_NUMBA:
        raise RuntimeError("numba is not importable")
    prev, BACKEND = BACKEND, name
    return prev


def _jit(fn):
    if not _HAVE_NUMBA:
        return fn
    return njit(cache=True, nogil=True)(fn)


# ---------------------------------------------------------------------------
# im2col / col2im (dense convolution)
# ---------------------------------------------------------------------------


def _im2col_np(xp, kh, kw, stride, ho, wo):
    b, _, _, c = xp.shape
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (b, ho, wo, c, kh, kw) -> (b, ho, wo, kh, kw, c)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b * ho * wo, kh * kw * c)


@_jit
def _im2col_nb(xp, kh, kw, stride, ho, wo):
    b, _, _, c = xp.shape
    out = np.empty((b * ho * wo, kh * kw * c), dtype=xp.dtype)
    r = 0
    for n in range(b):
        for i in range(ho):
            for j in range(wo):
                col = 0
                for m in range(kh):
                    for q in range(kw):
                        for ch in range(c):
                            out[r, col] = xp[n, i * stride + m, j * stride + q, ch]
                            col += 1
                r += 1
    return out


def _col2im_np(cols, xp_shape, kh, kw, stride, ho, wo):
    b, hp, wp, c = xp_shape
    dxp = np.zeros(xp_shape, dtype=cols.dtype)
    cols = cols.reshape(b, ho, wo, kh, kw, c)
    for m in range(kh):
        for q in range(kw):
            dxp[:, m : m + (ho - 1) * stride + 1 : stride, q : q + (wo - 1) * stride + 1 : stride, :] += cols[
                :, :, :, m, q, :
            ]
    return dxp


@_jit
def _col2im_nb(cols, b, hp, wp, c, kh, kw, stride, ho, wo):
    dxp = np.zeros((b, hp, wp, c), dtype=cols.dtype)
    # same accumulation order as the numpy path: kernel offset outermost
    for m in range(kh):
        for q in range(kw):
            base = (m * kw + q) * c
            for n in range(b):
                for i in range(ho):
                    for j in range(wo):
                        r = (n * ho + i) * wo + j
                        for ch in range(c):
                            dxp[n, i * stride + m, j * stride + q, ch] += cols[r, base + ch]
    return dxp


def im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Unfold padded NHWC input into rows of (kh, kw, c)-ordered patches."""
    if BACKEND == "numba":
        return _im2col_nb(np.ascontiguousarray(xp), kh, kw, stride, ho, wo)
    return _im2col_np(xp, kh, kw, stride, ho, wo)


def col2im(cols: np.ndarray, xp_shape, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch rows back to the padded input."""
    if BACKEND == "numba":
        b, hp, wp, c = xp_shape
        return _col2im_nb(np.ascontiguousarray(cols), b, hp, wp, c, kh, kw, stride, ho, wo)
    return _col2im_np(cols, tuple(xp_shape), kh, kw, stride, ho, wo)


# ---------------------------------------------------------------------------
# depthwise convolution (channel multiplier 1)
# ---------------------------------------------------------------------------


def _dw_forward_np(xp, k, stride, ho, wo):
    kh, kw, _ = k.shape
    out = np.zeros((xp.shape[0], ho, wo, xp.shape[3]), dtype=np.result_type(xp, k))
    for m in range(kh):
        for q in range(kw):
            out += xp[:, m : m + (ho - 1) * stride + 1 : stride, q : q + (wo - 1) * stride + 1 : stride, :] * k[m, q]
    return out


@_jit
def _dw_forward_nb(xp, k, stride, ho, wo):
    b = xp.shape[0]
    c = xp.shape[3]
    kh, kw, _ = k.shape
    out = np.zeros((b, ho, wo, c), dtype=xp.dtype)
    for m in range(kh):
        for q in range(kw):
            for n in range(b):
                for i in range(ho):
                    for j in range(wo):
                        for ch in range(c):
                            out[n, i, j, ch] += xp[n, i * stride + m, j * stride + q, ch] * k[m, q, ch]
    return out


def _dw_backward_np(xp, k, g, stride):
    kh, kw, c = k.shape
    _, ho, wo, _ = g.shape
    dxp = np.zeros_like(xp)
    dk = np.empty_like(k)
    for m in range(kh):
        for q in range(kw):
            sl = (slice(None), slice(m, m + (ho - 1) * stride + 1, stride), slice(q, q + (wo - 1) * stride + 1, stride))
            dxp[sl] += g * k[m, q]
            dk[m, q] = np.einsum("bhwc,bhwc->c", g, xp[sl])
    return dxp, dk


@_jit
def _dw_backward_nb(xp, k, g, stride):
    kh, kw, c = k.shape
    b, ho, wo, _ = g.shape
    dxp = np.zeros_like(xp)
    dk = np.zeros_like(k)
    for m in range(kh):
        for q in range(kw):
            for n in range(b):
                for i in range(ho):
                    for j in range(wo):
                        for ch in range(c):
                            gv = g[n, i, j, ch]
                            dxp[n, i * stride + m, j * stride + q, ch] += gv * k[m, q, ch]
                            dk[m, q, ch] += gv * xp[n, i * stride + m, j * stride + q, ch]
    return dxp, dk


def depthwise_forward(xp: np.ndarray, k: np.ndarray, stride: int, ho: int, wo: int) -> np.ndarray:
    """Per-channel cross-correlation of padded NHWC ``xp`` with ``k`` of shape (kh, kw, c)."""
    if BACKEND == "numba":
        return _dw_forward_nb(np.ascontiguousarray(xp), np.ascontiguousarray(k), stride, ho, wo)
    return _dw_forward_np(xp, k, stride, ho, wo)


def depthwise_backward(xp: np.ndarray, k: np.ndarray, g: np.ndarray, stride: int):
    """Gradients (d padded input, d kernel) of :func:`depthwise_forward`."""
    if BACKEND == "numba":
        return _dw_backward_nb(
            np.ascontiguousarray(xp), np.ascontiguousarray(k), np.ascontiguousarray(g), stride
        )
    return _dw_backward_np(xp, k, g, stride)


# ---------------------------------------------------------------------------
# image kernels
# ---------------------------------------------------------------------------


def _min_filter_np(img, size):
    r = size // 2
    p = np.pad(img, r, mode="edge")
    h, w = img.shape
    out = img.copy()
    for m in range(size):
        for q in range(size):
            np.minimum(out, p[m : m + h, q : q + w], out=out)
    return out


@_jit
def _min_filter_nb(img, size):
    h, w = img.shape
    r = size // 2
    out = np.empty_like(img)
    for i in range(h):
        for j in range(w):
            v = img[i, j]
            for m in range(-r, r + 1):
                ii = min(max(i + m, 0), h - 1)
                for q in range(-r, r + 1):
                    jj = min(max(j + q, 0), w - 1)
                    if img[ii, jj] < v:
                        v = img[ii, jj]
            out[i, j] = v
    return out


def min_filter(img: np.ndarray, size: int) -> np.ndarray:
    """Square min filter on a 2-D array with edge replication."""
    if BACKEND == "numba":
        return _min_filter_nb(np.ascontiguousarray(img), size)
    return _min_filter_np(img, size)


def _correlate_reflect_np(img, kernel):
    r = kernel.shape[0] // 2
    p = np.pad(img, r, mode="reflect")
    h, w = img.shape
    out = np.zeros((h, w), dtype=np.float64)
    for m in range(kernel.shape[0]):
        for q in range(kernel.shape[1]):
            out += kernel[m, q] * p[m : m + h, q : q + w]
    return out


@_jit
def _correlate_reflect_nb(img, kernel):
    h, w = img.shape
    kh, kw = kernel.shape
    r = kh // 2
    out = np.zeros((h, w), dtype=np.float64)
    for m in range(kh):
        for q in range(kw):
            kv = kernel[m, q]
            for i in range(h):
                ii = i + m - r
                if ii < 0:
                    ii = -ii
                elif ii >= h:
                    ii = 2 * (h - 1) - ii
                for j in range(w):
                    jj = j + q - r
                    if jj < 0:
                        jj = -jj
                    elif jj >= w:
                        jj = 2 * (w - 1) - jj
                    out[i, j] += kv * img[ii, jj]
    return out


def correlate_reflect(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-size 2-D correlation with reflect (mirror, no edge repeat) padding."""
    img = np.asarray(img, dtype=np.float64)
    # the numba loop mirrors once; images narrower than the radius need numpy's repeated reflection
    if BACKEND == "numba" and min(img.shape) > kernel.shape[0] // 2:
        return _correlate_reflect_nb(np.ascontiguousarray(img), np.ascontiguousarray(kernel, dtype=np.float64))
    return _correlate_reflect_np(img, kernel)


def _hough_np(xs, ys, cos_t, sin_t, rho_max):
    n_theta = cos_t.shape[0]
    n_rho = 2 * rho_max + 1
    rho = np.rint(np.outer(xs, cos_t) + np.outer(ys, sin_t)).astype(np.int64) + rho_max
    idx = rho + (np.arange(n_theta) * n_rho)[None, :]
    return np.bincount(idx.ravel(), minlength=n_theta * n_rho).reshape(n_theta, n_rho)


@_jit
def _hough_nb(xs, ys, cos_t, sin_t, rho_max):
    n_theta = cos_t.shape[0]
    acc = np.zeros((n_theta, 2 * rho_max + 1), dtype=np.int64)
    for p in range(xs.shape[0]):
        for t in range(n_theta):
            r = np.rint(xs[p] * cos_t[t] + ys[p] * sin_t[t])
            acc[t, int(r) + rho_max] += 1
    return acc


def hough_accumulate(xs, ys, thetas_rad, rho_max: int) -> np.ndarray:
    """Vote points into a (theta, rho) accumulator, rho = x cos(theta) + y sin(theta)."""
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    ys = np.ascontiguousarray(ys, dtype=np.float64)
    cos_t = np.cos(thetas_rad)
    sin_t = np.sin(thetas_rad)
    if BACKEND == "numba":
        return _hough_nb(xs, ys, cos_t, sin_t, int(rho_max))
    return _hough_np(xs, ys, cos_t, sin_t, int(rho_max))


def _bilinear_np(img, sy, sx, fill):
    h, w = img.shape
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy = sy - y0
    fx = sx - x0

    def tap(yy, xx):
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        v = np.full(sy.shape, fill, dtype=np.float64)
        v[ok] = img[yy[ok], xx[ok]]
        return v

    top = tap(y0, x0) * (1.0 - fx) + tap(y0, x0 + 1) * fx
    bot = tap(y0 + 1, x0) * (1.0 - fx) + tap(y0 + 1, x0 + 1) * fx
    return top * (1.0 - fy) + bot * fy


@_jit
def _tap(img, yy, xx, fill):
    h, w = img.shape
    if yy >= 0 and yy < h and xx >= 0 and xx < w:
        return img[yy, xx]
    return fill


@_jit
def _bilinear_nb(img, sy, sx, fill):
    n = sy.shape[0]
    out = np.empty(n, dtype=np.float64)
    for p in range(n):
        y = sy[p]
        x = sx[p]
        y0 = int(np.floor(y))
        x0 = int(np.floor(x))
        fy = y - y0
        fx = x - x0
        top = _tap(img, y0, x0, fill) * (1.0 - fx) + _tap(img, y0, x0 + 1, fill) * fx
        bot = _tap(img, y0 + 1, x0, fill) * (1.0 - fx) + _tap(img, y0 + 1, x0 + 1, fill) * fx
        out[p] = top * (1.0 - fy) + bot * fy
    return out


def bilinear_sample(img: np.ndarray, sy: np.ndarray, sx: np.ndarray, fill: float) -> np.ndarray:
    """Sample a 2-D array at real coordinates; taps outside the grid read ``fill``."""
    img = np.ascontiguousarray(img, dtype=np.float64)
    sy = np.ascontiguousarray(sy, dtype=np.float64)
    sx = np.ascontiguousarray(sx, dtype=np.float64)
    if BACKEND == "numba":
        return _bilinear_nb(img, sy.ravel(), sx.ravel(), float(fill)).reshape(sy.shape)
    return _bilinear_np(img, sy, sx, float(fill))


# ---------------------------------------------------------------------------
# fused activations
# ---------------------------------------------------------------------------

_SQRT1_2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def _swish_fwd(x):
    # sigmoid(x) = (1 + tanh(x / 2)) / 2; vectorised tanh beats a scalar exp loop
    s = np.multiply(x, 0.5)
    np.tanh(s, out=s)
    s *= 0.5
    s += 0.5
    return x * s, s


def _swish_bwd_np(x, s, g):
    return g * (s + x * s * (1.0 - s))


@_jit
def _swish_bwd_nb(x, s, g):
    out = np.empty_like(x)
    for i in range(x.size):
        sv = s[i]
        out[i] = g[i] * (sv + x[i] * sv * (1.0 - sv))
    return out


def _gelu_fwd_np(x):
    cdf = np.multiply(x, _SQRT1_2)
    erf(cdf, out=cdf)
    cdf += 1.0
    cdf *= 0.5
    return x * cdf, cdf


@_jit
def _gelu_fwd_nb(x):
    y = np.empty_like(x)
    cdf = np.empty_like(x)
    for i in range(x.size):
        c = 0.5 * (1.0 + math.erf(x[i] * _SQRT1_2))
        cdf[i] = c
        y[i] = x[i] * c
    return y, cdf


def _gelu_bwd_np(x, cdf, g):
    return g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x))


@_jit
def _gelu_bwd_nb(x, cdf, g):
    out = np.empty_like(x)
    for i in range(x.size):
        v = x[i]
        out[i] = g[i] * (cdf[i] + v * _INV_SQRT_2PI * math.exp(-0.5 * v * v))
    return out


def _flat_call(nb_fn, *arrays):
    shape = arrays[0].shape
    res = nb_fn(*(np.ascontiguousarray(a).reshape(-1) for a in arrays))
    if isinstance(res, tuple):
        return tuple(r.reshape(shape) for r in res)
    return res.reshape(shape)


def swish_forward(x: np.ndarray):
    """Returns ``(x * sigmoid(x), sigmoid(x))``.

    The forward pass is shared by both backends: a scalar-exp numba loop
    measured slower than numpy's vectorised tanh on this workload.
    """
    return _swish_fwd(x)


def swish_backward(x: np.ndarray, s: np.ndarray, g: np.ndarray) -> np.ndarray:
    if BACKEND == "numba":
        return _flat_call(_swish_bwd_nb, x, s, np.broadcast_to(g, x.shape))
    return _swish_bwd_np(x, s, g)


def gelu_forward(x: np.ndarray):
    """Exact GELU; returns ``(x * Phi(x), Phi(x))``."""
    if BACKEND == "numba":
        return _flat_call(_gelu_fwd_nb, x)
    return _gelu_fwd_np(x)


def gelu_backward(x: np.ndarray, cdf: np.ndarray, g: np.ndarray) -> np.ndarray:
    if BACKEND == "numba":
        return _flat_call(_gelu_bwd_nb, x, cdf, np.broadcast_to(g, x.shape))
    return _gelu_bwd_np(x, cdf, g)
