"""Image preprocessing: smoothing, Hough skew estimation, rotation, dilation, resizing.

Images are 8-bit ``H x W x C`` arrays wrapped in :class:`Image` together with a
channel-order tag.  Ink is dark on light paper, so dilation of the foreground
is a min filter and out-of-bounds samples read white.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels

ORDERS = ("GRAY", "BGR", "RGB")
BACKGROUND = 255


class NoForegroundError(ValueError):
    pass


@dataclass(frozen=True)
class Image:
    pixels: np.ndarray  # uint8, H x W x C
    order: str = "BGR"

    def __post_init__(self):
        px = self.pixels
        if px.ndim == 2:
            px = px[:, :, None]
            object.__setattr__(self, "pixels", px)
        if px.dtype != np.uint8:
            raise TypeError(f"pixels must be uint8, got {px.dtype}")
        if px.ndim != 3 or px.shape[0] < 1 or px.shape[1] < 1 or px.shape[2] not in (1, 3):
            raise ValueError(f"pixels must be H x W x (1|3), got {px.shape}")
        if self.order not in ORDERS:
            raise ValueError(f"unknown channel order {self.order!r}")
        if (px.shape[2] == 1) != (self.order == "GRAY"):
            raise ValueError(f"order {self.order} does not match {px.shape[2]} channels")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def with_pixels(self, pixels: np.ndarray) -> "Image":
        return Image(pixels, self.order)


def _to_u8(a: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(a), 0, 255).astype(np.uint8)


def _per_channel(img: Image, fn) -> Image:
    out = np.stack([fn(img.pixels[:, :, c]) for c in range(img.channels)], axis=2)
    return img.with_pixels(out)


def to_gray(img: Image) -> np.ndarray:
    """Luma (ITU-R 601 weights) as a 2-D uint8 array."""
    px = img.pixels.astype(np.float64)
    if img.order == "GRAY":
        return img.pixels[:, :, 0].copy()
    r, g, b = (px[:, :, 0], px[:, :, 1], px[:, :, 2]) if img.order == "RGB" else (px[:, :, 2], px[:, :, 1], px[:, :, 0])
    return _to_u8(0.299 * r + 0.587 * g + 0.114 * b)


# ---------------------------------------------------------------------------
# smoothing
# ---------------------------------------------------------------------------


def gaussian_kernel(sigma: float, radius: int, normalize: bool = True) -> np.ndarray:
    """Samples of ``exp(-(x^2+y^2) / (2 sigma^2)) / (2 pi sigma^2)`` on ``[-r, r]^2``."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    xx, yy = np.meshgrid(ax, ax)
    k = np.exp(-(xx**2 + yy**2) / (2.0 * sigma**2)) / (2.0 * math.pi * sigma**2)
    return k / k.sum() if normalize else k


def gaussian_blur(img: Image, sigma: float = 1.0, radius: int = 2) -> Image:
    k = gaussian_kernel(sigma, radius)
    return _per_channel(img, lambda ch: _to_u8(_kernels.correlate_reflect(ch, k)))


# ---------------------------------------------------------------------------
# skew
# ---------------------------------------------------------------------------


def otsu_threshold(gray: np.ndarray) -> int:
    """Threshold t maximizing between-class variance of ``gray <= t`` vs ``gray > t``."""
    hist = np.bincount(np.asarray(gray, dtype=np.uint8).ravel(), minlength=256).astype(np.float64)
    total = hist.sum()
    levels = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(hist)
    w1 = total - w0
    s0 = np.cumsum(hist * levels)
    mu0 = np.divide(s0, w0, out=np.zeros(256), where=w0 > 0)
    mu1 = np.divide(s0[-1] - s0, w1, out=np.zeros(256), where=w1 > 0)
    between = w0 * w1 * (mu0 - mu1) ** 2
    return int(np.argmax(between))


def foreground_mask(img: Image) -> np.ndarray:
    """Ink pixels after Otsu binarization; a constant image has no ink."""
    gray = to_gray(img)
    if gray.min() == gray.max():
        return np.zeros(gray.shape, dtype=bool)
    return gray <= otsu_threshold(gray)


def hough_rho(x: float, y: float, theta_deg: float) -> float:
    t = math.radians(theta_deg)
    return x * math.cos(t) + y * math.sin(t)


SKEW_GRID = np.arange(-90, 91) * 0.5  # degrees, -45 .. 45


def estimate_skew(img: Image) -> float:
    """Dominant line angle in degrees, positive for counterclockwise tilt.

    Ink pixels vote with ``rho = x cos(theta) + y sin(theta)`` (x right,
    y down) where theta is the line normal, ``theta = 90 deg - skew``.
    Strokes several pixels thick give a plateau of equal peak counts over
    neighbouring angles, so each angle is scored by the energy of its rho
    column (sum of squared votes), which peaks where the votes concentrate
    into the fewest cells.  Ties go to the smallest absolute skew.
    """
    mask = foreground_mask(img)
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        raise NoForegroundError("no foreground pixels to estimate skew from")
    acc = hough_accumulator(xs, ys, img.height, img.width)
    energy = (acc.astype(np.float64) ** 2).sum(axis=1)
    order = np.lexsort((np.abs(SKEW_GRID), -energy))
    return float(SKEW_GRID[order[0]])


def hough_accumulator(xs, ys, height: int, width: int) -> np.ndarray:
    """Vote counts of shape ``[len(SKEW_GRID), 2 * rho_max + 1]`` with integer rho bins."""
    thetas = np.radians(90.0 - SKEW_GRID)
    rho_max = int(math.ceil(math.hypot(height, width))) + 1
    return _kernels.hough_accumulate(xs, ys, thetas, rho_max)


def rotate(img: Image, angle: float, fill: int = BACKGROUND) -> Image:
    """Rotate content counterclockwise by ``angle`` degrees about the image center."""
    if angle == 0:
        return img.with_pixels(img.pixels.copy())
    h, w = img.height, img.width
    a = math.radians(angle)
    ca, sa = math.cos(a), math.sin(a)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    oy, ox = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = ox - cx, oy - cy
    sx = dx * ca - dy * sa + cx
    sy = dx * sa + dy * ca + cy
    return _per_channel(img, lambda ch: _to_u8(_kernels.bilinear_sample(ch, sy, sx, fill)))


def deskew(img: Image, angle: float) -> Image:
    """Rotate by ``angle`` degrees (counterclockwise); limited to skew-sized angles."""
    if abs(angle) > 45:
        raise ValueError(f"deskew angle must satisfy |angle| <= 45, got {angle}")
    return rotate(img, angle)


# ---------------------------------------------------------------------------
# morphology and geometry
# ---------------------------------------------------------------------------


def dilate(img: Image, kernel_size: int = 3) -> Image:
    """Grow dark ink: min over a square window, borders replicated."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"kernel_size must be odd and >= 1, got {kernel_size}")
    if kernel_size == 1:
        return img.with_pixels(img.pixels.copy())
    return _per_channel(img, lambda ch: _kernels.min_filter(ch, kernel_size))


def _axis_coords(n_in: int, n_out: int) -> np.ndarray:
    if n_out == 1:
        return np.array([(n_in - 1) / 2.0])
    return np.arange(n_out) * (n_in - 1) / (n_out - 1)


def resize(img: Image, out_h: int, out_w: int) -> Image:
    """Corner-aligned bilinear resize."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    if (out_h, out_w) == (img.height, img.width):
        return img.with_pixels(img.pixels.copy())
    sy, sx = np.meshgrid(_axis_coords(img.height, out_h), _axis_coords(img.width, out_w), indexing="ij")
    # taps past the last row/column carry zero weight; any finite fill works
    return _per_channel(img, lambda ch: _to_u8(_kernels.bilinear_sample(ch, sy, sx, 0.0)))


def to_rgb_normalized(img: Image) -> np.ndarray:
    """RGB float64 array in [0, 1]: ``value / 255``."""
    px = img.pixels
    if img.order == "GRAY":
        px = np.repeat(px, 3, axis=2)
    elif img.order == "BGR":
        px = px[:, :, ::-1]
    return px.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


def preprocess_pipeline(img: Image, cfg=None, stages: dict | None = None) -> np.ndarray:
    """blur -> deskew -> dilate -> resize -> RGB -> [0, 1], each stage optional.

    When ``stages`` is a dict, every intermediate :class:`Image` is stored in it
    by stage name.
    """
    if cfg is None:
        from .config import PipelineConfig

        cfg = PipelineConfig()
    if stages is not None:
        stages["input"] = img
    if cfg.blur:
        img = gaussian_blur(img, cfg.sigma, cfg.radius)
        if stages is not None:
            stages["blur"] = img
    if cfg.deskew:
        img = deskew(img, -estimate_skew(img))
        if stages is not None:
            stages["deskew"] = img
    if cfg.dilate:
        img = dilate(img, cfg.dilate_kernel)
        if stages is not None:
            stages["dilate"] = img
    if cfg.resize:
        img = resize(img, cfg.size, cfg.size)
        if stages is not None:
            stages["resize"] = img
    return to_rgb_normalized(img)


# ---------------------------------------------------------------------------
# file IO
# ---------------------------------------------------------------------------


def load_image(path: str | Path) -> Image:
    """Decode a PNG/JPEG file; color images come back BGR, others as GRAY."""
    from PIL import Image as PILImage, UnidentifiedImageError

    try:
        with PILImage.open(path) as im:
            im.load()
            if im.mode in ("L", "1", "I;16", "I", "F"):
                return Image(np.asarray(im.convert("L"), dtype=np.uint8), "GRAY")
            rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from None
    return Image(np.ascontiguousarray(rgb[:, :, ::-1]), "BGR")


def save_png(img: Image, path: str | Path) -> None:
    from PIL import Image as PILImage

    px = img.pixels
    if img.order == "GRAY":
        PILImage.fromarray(px[:, :, 0], "L").save(path)
    else:
        rgb = px[:, :, ::-1] if img.order == "BGR" else px
        PILImage.fromarray(np.ascontiguousarray(rgb), "RGB").save(path)
