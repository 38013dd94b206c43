"""Grad-CAM heatmaps for a chosen convolutional feature map."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import _kernels
from .tensor import Tensor

DEFAULT_LAYER = "cnn.stem.top"


def upsample_bilinear(
    m: np.ndarray, out_h: int, out_w: int, geometry: tuple[float, float] | None = None
) -> np.ndarray:
    """Bilinear resize of a 2-D float map that puts each cell on the input pixel it was computed around.

    ``geometry`` is ``(stride, offset)``: cell ``i`` is centred on pixel
    ``offset + stride * i`` along both axes.  Without it each cell sits at
    the centre of its ``out / in`` footprint.  Pixels beyond the outermost
    centres take the border cell's value.
    """
    h, w = m.shape

    def coords(n_in, n_out):
        if geometry is None:
            stride = n_out / n_in
            offset = (stride - 1.0) / 2.0
        else:
            stride, offset = geometry
        return np.clip((np.arange(n_out) - offset) / stride, 0.0, n_in - 1)

    sy, sx = np.meshgrid(coords(h, out_h), coords(w, out_w), indexing="ij")
    return _kernels.bilinear_sample(m, sy, sx, 0.0)


def normalize_map(m: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; an all-zero map stays zero, a flat positive map becomes ones."""
    lo, hi = float(m.min()), float(m.max())
    if hi > lo:
        return (m - lo) / (hi - lo)
    return np.ones_like(m) if hi > 0 else np.zeros_like(m)


def cam_from(activation: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """``ReLU(sum_k alpha_k A^k)`` with ``alpha_k`` the spatial mean of the gradient; inputs ``[h, w, K]``."""
    alpha = grad.mean(axis=(0, 1))
    return np.maximum(activation @ alpha, 0.0)


def grad_cam(model, x, target_class: int | None = None, layer: str = DEFAULT_LAYER) -> tuple[np.ndarray, int]:
    """Heatmap ``[H, W]`` in [0, 1] for one image ``[H, W, 3]`` and the class it explains.

    ``target_class`` defaults to the predicted class.
    """
    valid = model.layer_names()
    if layer not in valid:
        raise KeyError(f"unknown Grad-CAM layer {layer!r}; valid layers: {', '.join(valid)}")
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    if x.ndim == 3:
        x = x[None]
    if x.shape[0] != 1:
        raise ValueError("grad_cam explains one image at a time")
    was = model.training
    model.eval()
    try:
        capture: dict = {}
        xt = Tensor(x, requires_grad=True)
        logits = model(xt, capture)
        act = capture[layer]
        act.retain_grad()
        if target_class is None:
            target_class = int(np.argmax(logits.data[0]))
        onehot = np.zeros(logits.shape)
        onehot[0, target_class] = 1.0
        (logits * onehot).sum().backward()
        grad = act.grad if act.grad is not None else np.zeros_like(act.data)
        cam = cam_from(act.data[0], grad[0])
    finally:
        model.train(was)
        model.zero_grad()
    geometry = model.layer_geometry().get(layer) if hasattr(model, "layer_geometry") else None
    heat = upsample_bilinear(cam, x.shape[1], x.shape[2], geometry)
    return normalize_map(heat), target_class


# ---------------------------------------------------------------------------
# output files
# ---------------------------------------------------------------------------

_JET = np.array([[0, 0, 0.5], [0, 0, 1], [0, 1, 1], [1, 1, 0], [1, 0, 0], [0.5, 0, 0]])


def colorize(heat: np.ndarray) -> np.ndarray:
    """Jet-style RGB colors in [0, 1] for values in [0, 1]."""
    pos = np.linspace(0.0, 1.0, len(_JET))
    return np.stack([np.interp(heat, pos, _JET[:, c]) for c in range(3)], axis=-1)


def blend(image_rgb: np.ndarray, heat: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    return (1.0 - alpha) * image_rgb + alpha * colorize(heat)


def write_pgm16(path: str | Path, heat: np.ndarray) -> None:
    """Binary 16-bit PGM (big-endian samples, maxval 65535)."""
    h, w = heat.shape
    vals = np.rint(np.clip(heat, 0.0, 1.0) * 65535).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(vals.tobytes())


def read_pgm16(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=">u2").reshape(h, w).astype(np.float64) / 65535.0


def write_outputs(stem: str | Path, image_rgb: np.ndarray, heat: np.ndarray) -> tuple[Path, Path]:
    """Write ``<stem>.cam.png`` (50% blend over the input) and ``<stem>.cam.raw.pgm``."""
    from PIL import Image as PILImage

    stem = Path(stem)
    png = stem.with_name(stem.name + ".cam.png")
    pgm = stem.with_name(stem.name + ".cam.raw.pgm")
    rgb = np.clip(np.rint(blend(image_rgb, heat) * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(rgb, "RGB").save(png)
    write_pgm16(pgm, heat)
    return png, pgm
