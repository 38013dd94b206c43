"""Dataset manifests, stratified splits, preprocessing cache and the synthetic glyph corpus."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imageproc
from .imageproc import Image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".pgm", ".ppm", ".tif", ".tiff")
MIN_PER_CLASS = 3


class DataError(Exception):
    """Missing, empty or undecodable dataset input (CLI exit code 2)."""


# ---------------------------------------------------------------------------
# manifest and splits
# ---------------------------------------------------------------------------


def split_counts(n: int, val_fraction: float = 0.1, test_fraction: float = 0.1) -> tuple[int, int, int]:
    """Per-class (train, val, test) sizes; val and test get at least one sample each."""
    n_val = max(1, int(round(n * val_fraction)))
    n_test = max(1, int(round(n * test_fraction)))
    return n - n_val - n_test, n_val, n_test


def stratified_split(labels, seed: int, val_fraction: float = 0.1, test_fraction: float = 0.1) -> dict[str, np.ndarray]:
    """Index arrays for train/val/test, shuffled within each class by ``seed``."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    parts = {"train": [], "val": [], "test": []}
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if idx.size < MIN_PER_CLASS:
            raise DataError(f"class {c} has {idx.size} samples; at least {MIN_PER_CLASS} are needed to split")
        idx = idx[rng.permutation(idx.size)]
        n_tr, n_va, _ = split_counts(idx.size, val_fraction, test_fraction)
        parts["train"].append(idx[:n_tr])
        parts["val"].append(idx[n_tr : n_tr + n_va])
        parts["test"].append(idx[n_tr + n_va :])
    return {k: np.sort(np.concatenate(v)) for k, v in parts.items()}


@dataclass
class Manifest:
    root: Path
    classes: list[str]
    files: list[Path]
    labels: np.ndarray
    split_seed: int = 0
    splits: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def subset(self, name: str) -> tuple[list[Path], np.ndarray]:
        idx = self.splits[name]
        return [self.files[i] for i in idx], self.labels[idx]


def _check_decodable(path: Path) -> None:
    from PIL import Image as PILImage, UnidentifiedImageError

    try:
        with PILImage.open(path) as im:
            im.verify()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DataError(f"cannot decode image file {path}: {exc}") from None


def load_dataset(
    root: str | Path, split_seed: int = 0, val_fraction: float = 0.1, test_fraction: float = 0.1, verify: bool = True
) -> Manifest:
    """Scan ``root/<class>/<image>``; class ids follow the byte order of folder names."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    classes = sorted((p.name for p in root.iterdir() if p.is_dir()), key=lambda s: s.encode())
    files, labels = [], []
    kept = []
    for name in classes:
        imgs = sorted(
            (p for p in (root / name).iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES),
            key=lambda p: p.name.encode(),
        )
        if not imgs:
            continue
        for p in imgs:
            if verify:
                _check_decodable(p)
            files.append(p)
            labels.append(len(kept))
        kept.append(name)
    if not kept:
        raise DataError(f"no classes found under {root}")
    if len(kept) < 2:
        raise DataError(f"need at least 2 classes, found {len(kept)} under {root}")
    labels = np.asarray(labels, dtype=np.int64)
    splits = stratified_split(labels, split_seed, val_fraction, test_fraction)
    return Manifest(root, kept, files, labels, split_seed, splits)


# ---------------------------------------------------------------------------
# preprocessing with an on-disk cache
# ---------------------------------------------------------------------------


def _pipeline_key(cfg) -> str:
    return hashlib.sha1(json.dumps(vars(cfg), sort_keys=True, default=str).encode()).hexdigest()[:12]


def preprocess_u8(img: Image, cfg) -> np.ndarray:
    """Pipeline output as RGB uint8; dividing by 255 gives the normalized image exactly."""
    norm = imageproc.preprocess_pipeline(img, cfg)
    return np.rint(norm * 255.0).astype(np.uint8)


def _load_one(path: Path, cfg, cache: Path | None) -> np.ndarray:
    entry = None
    if cache is not None:
        st = path.stat()
        tag = hashlib.sha1(f"{path.resolve()}|{st.st_size}|{st.st_mtime_ns}".encode()).hexdigest()
        entry = cache / f"{tag}.npy"
        if entry.exists():
            return np.load(entry)
    try:
        img = imageproc.load_image(path)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    arr = preprocess_u8(img, cfg)
    if entry is not None:
        np.save(entry, arr)
    return arr


def load_images(paths, cfg, cache_dir: str | Path | None = None, workers: int = 1) -> np.ndarray:
    """Preprocess ``paths`` into a ``[N, S, S, 3]`` uint8 stack, reusing cached results.

    With ``workers > 1`` files are processed on a thread pool; results keep input order.
    """
    cache = Path(cache_dir) / _pipeline_key(cfg) if cache_dir is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
    paths = [Path(p) for p in paths]
    if workers > 1 and len(paths) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(lambda p: _load_one(p, cfg, cache), paths))
    else:
        out = [_load_one(p, cfg, cache) for p in paths]
    return np.stack(out) if out else np.zeros((0, cfg.size, cfg.size, 3), np.uint8)


def to_float(batch_u8: np.ndarray, dtype=np.float64) -> np.ndarray:
    return batch_u8.astype(dtype) / 255.0


# ---------------------------------------------------------------------------
# synthetic glyphs
# ---------------------------------------------------------------------------


def parse_synthetic(size: str) -> tuple[int, int]:
    """``"8x200"`` -> (8 classes, 200 samples each)."""
    parts = size.lower().replace("×", "x").split("x")
    if len(parts) != 2:
        raise ValueError(f"synthetic size must look like CxN, got {size!r}")
    c, n = int(parts[0]), int(parts[1])
    if c < 2 or n < MIN_PER_CLASS:
        raise ValueError(f"synthetic corpus needs >= 2 classes and >= {MIN_PER_CLASS} samples each")
    return c, n


def _arc(rng, cx, cy, r, a0, sweep, n=12):
    t = np.radians(a0 + sweep * np.linspace(0.0, 1.0, n))
    return np.stack([cx + r * np.cos(t), cy + r * np.sin(t)], axis=1)


def glyph_template(class_id: int) -> list[np.ndarray]:
    """Stroke polylines in unit coordinates for one class: a headline plus 2-4 strokes.

    The template depends on ``class_id`` only.
    """
    rng = np.random.default_rng([int(class_id), 0x61F])
    top = 0.24
    strokes = [np.array([[0.12, top], [0.88, top]])]
    for _ in range(int(rng.integers(2, 5))):
        kind = int(rng.integers(0, 4))
        if kind == 0:  # vertical bar hanging from the headline
            x = rng.uniform(0.25, 0.8)
            strokes.append(np.array([[x, top], [x + rng.uniform(-0.05, 0.05), rng.uniform(0.6, 0.9)]]))
        elif kind == 1:  # arc / bowl
            strokes.append(
                _arc(rng, rng.uniform(0.3, 0.7), rng.uniform(0.45, 0.7), rng.uniform(0.1, 0.22),
                     rng.uniform(0, 360), rng.uniform(150, 300))
            )
        elif kind == 2:  # diagonal
            p0 = [rng.uniform(0.15, 0.85), rng.uniform(0.3, 0.55)]
            p1 = [rng.uniform(0.15, 0.85), rng.uniform(0.55, 0.9)]
            strokes.append(np.array([p0, p1]))
        else:  # hook: short arc ending in a straight tail
            cx, cy, r = rng.uniform(0.3, 0.7), rng.uniform(0.4, 0.6), rng.uniform(0.08, 0.15)
            a = _arc(rng, cx, cy, r, rng.uniform(0, 360), rng.uniform(120, 220), 8)
            tail = a[-1] + np.array([rng.uniform(-0.1, 0.1), rng.uniform(0.1, 0.25)])
            strokes.append(np.vstack([a, np.clip(tail, 0.05, 0.95)]))
    return strokes


def render_glyph(
    class_id: int,
    rng: np.random.Generator | None = None,
    size: int = 128,
    skew: float | None = None,
    thickness: int | None = None,
    max_rotation: float = 4.0,
    jitter: float = 0.02,
    noise: float = 4.0,
) -> Image:
    """Draw one sample of ``class_id`` as a grayscale image of dark strokes on white.

    ``skew`` fixes the rotation (degrees, counterclockwise) instead of drawing it;
    the headline is the reference line of that angle.
    """
    from PIL import Image as PILImage, ImageDraw

    rng = rng if rng is not None else np.random.default_rng()
    strokes = glyph_template(class_id)
    angle = float(rng.uniform(-max_rotation, max_rotation)) if skew is None else float(skew)
    width = int(rng.integers(3, 6)) if thickness is None else int(thickness)
    scale = rng.uniform(0.9, 1.05)
    shift = rng.uniform(-0.04, 0.04, size=2)
    a = math.radians(angle)
    # counterclockwise on screen, where y grows downwards
    rot = np.array([[math.cos(a), math.sin(a)], [-math.sin(a), math.cos(a)]])
    ss = 4  # supersampling keeps the drawn angle exact despite integer pixel endpoints
    canvas = PILImage.new("L", (size * ss, size * ss), 255)
    draw = ImageDraw.Draw(canvas)
    for i, s in enumerate(strokes):
        if i == 0:  # the headline moves as a whole so the drawn skew stays exact
            pts = s + rng.uniform(-jitter, jitter, size=(1, 2))
        else:
            pts = s + rng.uniform(-jitter, jitter, size=s.shape)
        pts = ((pts - 0.5) * scale) @ rot.T + 0.5 + shift
        pts = (pts * size) * ss
        draw.line([tuple(p) for p in pts], fill=0, width=width * ss, joint="curve")
    px = np.asarray(canvas.reduce(ss), dtype=np.float64)
    if noise > 0:
        px = px + rng.normal(0.0, noise, px.shape)
    return Image(np.clip(np.rint(px), 0, 255).astype(np.uint8), "GRAY")


def synthetic_images(n_classes: int, per_class: int, seed: int = 0, **kw) -> tuple[list[Image], np.ndarray]:
    images, labels = [], []
    for c in range(n_classes):
        rng = np.random.default_rng([seed, c, 0xD47A])
        for _ in range(per_class):
            images.append(render_glyph(c, rng, **kw))
            labels.append(c)
    return images, np.asarray(labels, dtype=np.int64)


def write_synthetic_corpus(root: str | Path, n_classes: int, per_class: int, seed: int = 0) -> Path:
    """Materialize ``root/g<cc>/<i>.png``; folder names sort in class-id order."""
    root = Path(root)
    images, labels = synthetic_images(n_classes, per_class, seed)
    width = max(2, len(str(n_classes - 1)))
    counters = [0] * n_classes
    for img, c in zip(images, labels):
        d = root / f"g{int(c):0{width}d}"
        d.mkdir(parents=True, exist_ok=True)
        imageproc.save_png(img, d / f"{counters[c]:05d}.png")
        counters[c] += 1
    return root
