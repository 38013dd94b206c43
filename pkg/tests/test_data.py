import numpy as np
import pytest

from mhcaf import data, imageproc
from mhcaf.config import PipelineConfig


def make_tree(root, n_classes, per_class, size=8):
    rng = np.random.default_rng(0)
    for c in range(n_classes):
        d = root / f"c{c:02d}"
        d.mkdir(parents=True)
        for i in range(per_class):
            px = rng.integers(0, 256, size=(size, size)).astype(np.uint8)
            imageproc.save_png(imageproc.Image(px, "GRAY"), d / f"{i}.png")
    return root


def test_split_8_1_1(tmp_path):
    root = make_tree(tmp_path / "ds", 3, 10)
    m1 = data.load_dataset(root, split_seed=4)
    m2 = data.load_dataset(root, split_seed=4)
    for name, n in (("train", 8), ("val", 1), ("test", 1)):
        assert np.all(np.bincount(m1.subset(name)[1], minlength=3) == n)
        assert np.array_equal(m1.splits[name], m2.splits[name])
    allidx = np.concatenate([m1.splits[k] for k in ("train", "val", "test")])
    assert np.array_equal(np.sort(allidx), np.arange(30))


def test_78_classes(tmp_path):
    m = data.load_dataset(make_tree(tmp_path / "ds", 78, 3, size=4))
    assert m.num_classes == 78 and m.classes[0] == "c00"


def test_empty_dir(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(data.DataError, match="no classes found"):
        data.load_dataset(tmp_path / "empty")


def test_missing_dir(tmp_path):
    with pytest.raises(data.DataError, match="not found"):
        data.load_dataset(tmp_path / "nope")


def test_undecodable(tmp_path):
    root = make_tree(tmp_path / "ds", 2, 3)
    (root / "c00" / "broken.png").write_bytes(b"\x89PNG garbage")
    with pytest.raises(data.DataError, match="broken.png"):
        data.load_dataset(root)


def test_synthetic_deterministic():
    a, la = data.synthetic_images(3, 4, seed=9)
    b, lb = data.synthetic_images(3, 4, seed=9)
    assert np.array_equal(la, lb)
    assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a, b))
    c, _ = data.synthetic_images(3, 4, seed=10)
    assert not np.array_equal(a[0].pixels, c[0].pixels)


def test_templates_differ():
    t = [data.glyph_template(c) for c in range(8)]
    sigs = {tuple(np.round(np.concatenate(s).ravel(), 6)) for s in t}
    assert len(sigs) == 8


def test_parse_synthetic():
    assert data.parse_synthetic("8x200") == (8, 200)
    with pytest.raises(ValueError):
        data.parse_synthetic("8")


def test_load_images_cache(tmp_path):
    root = data.write_synthetic_corpus(tmp_path / "syn", 2, 3, seed=1)
    m = data.load_dataset(root)
    cfg = PipelineConfig(size=32)
    x1 = data.load_images(m.files, cfg, tmp_path / "cache", workers=2)
    x2 = data.load_images(m.files, cfg, tmp_path / "cache", workers=1)
    assert x1.shape == (6, 32, 32, 3) and x1.dtype == np.uint8
    assert np.array_equal(x1, x2)
    assert len(list((tmp_path / "cache").rglob("*.npy"))) == 6
    np.testing.assert_array_equal(
        data.to_float(x1[:1])[0], imageproc.preprocess_pipeline(imageproc.load_image(m.files[0]), cfg)
    )
