import math

import numpy as np
import pytest
from PIL import Image as PILImage, ImageDraw

from mhcaf import imageproc as ip
from mhcaf.config import PipelineConfig
from mhcaf.data import render_glyph
from mhcaf.imageproc import Image

import oracles


def gray(a):
    return Image(np.asarray(a, dtype=np.uint8), "GRAY")


def ink(img):
    return img.pixels[:, :, 0] < 128


def iou(a, b):
    return (a & b).sum() / (a | b).sum()


def line_image(angle_deg, size=96, width=2):
    """A dark line through the center tilted counterclockwise by ``angle_deg``."""
    im = PILImage.new("L", (size * 4, size * 4), 255)
    a = math.radians(angle_deg)
    c = size * 2
    half = size * 1.5
    p0 = (c - half * math.cos(a), c + half * math.sin(a))
    p1 = (c + half * math.cos(a), c - half * math.sin(a))
    ImageDraw.Draw(im).line([p0, p1], fill=0, width=width * 4)
    return gray(np.asarray(im.reduce(4)))


class TestGaussian:
    @pytest.mark.parametrize("sigma", [0.5, 1.0, 2.0])
    def test_kernel_sums_to_one(self, sigma):
        assert abs(ip.gaussian_kernel(sigma, 2).sum() - 1.0) <= 1e-12

    def test_center_weight(self):
        k = ip.gaussian_kernel(1.0, 2, normalize=False)
        assert abs(k[2, 2] - 1 / (2 * math.pi)) < 1e-15
        assert abs(k[2, 2] - 0.15915) < 1e-5

    def test_constant_image(self):
        img = gray(np.full((9, 7), 137))
        assert np.array_equal(ip.gaussian_blur(img).pixels, img.pixels)

    def test_single_pixel_double_loop(self):
        a = np.zeros((9, 9), dtype=np.uint8)
        a[4, 4] = 255
        k = ip.gaussian_kernel(1.0, 2)
        want = np.zeros((9, 9))
        for y in range(9):
            for x in range(9):
                s = 0.0
                for dy in range(-2, 3):
                    for dx in range(-2, 3):
                        yy, xx = abs(y + dy), abs(x + dx)
                        yy = 16 - yy if yy > 8 else yy
                        xx = 16 - xx if xx > 8 else xx
                        s += k[dy + 2, dx + 2] * float(a[yy, xx])
                want[y, x] = s
        got = ip.gaussian_blur(gray(a), 1.0, 2).pixels[:, :, 0]
        assert np.array_equal(got, np.clip(np.rint(want), 0, 255).astype(np.uint8))

    def test_bad_sigma(self):
        with pytest.raises(ValueError):
            ip.gaussian_blur(gray(np.zeros((4, 4))), sigma=0.0)


class TestSkew:
    def test_rho(self):
        assert ip.hough_rho(1, 0, 0) == 1.0

    def test_horizontal_line(self):
        assert abs(ip.estimate_skew(line_image(0.0))) <= 0.5

    @pytest.mark.parametrize("angle", [7.0, -7.0, 3.5, 12.0])
    def test_line_round_trip(self, angle):
        assert abs(ip.estimate_skew(line_image(angle)) - angle) <= 1.0

    def test_glyph_round_trip(self):
        rng = np.random.default_rng(3)
        for angle in (-15.0, -8.0, 0.0, 5.5, 15.0):
            img = render_glyph(int(rng.integers(0, 10)), rng, skew=angle)
            assert abs(ip.estimate_skew(img) - angle) <= 1.0

    def test_blank_image(self):
        with pytest.raises(ip.NoForegroundError):
            ip.estimate_skew(gray(np.full((8, 8), 255)))


class TestRotate:
    def test_zero_is_identity(self, rng):
        img = gray(rng.integers(0, 256, size=(10, 12)))
        assert np.array_equal(ip.deskew(img, 0.0).pixels, img.pixels)

    def test_two_quarter_turns(self, rng):
        a = rng.integers(0, 256, size=(11, 11))
        img = gray(a)
        twice = ip.rotate(ip.rotate(img, 90.0), 90.0)
        assert np.array_equal(twice.pixels[:, :, 0], a[::-1, ::-1])

    def test_counterclockwise(self):
        a = np.full((9, 9), 255)
        a[4, 8] = 0  # right of center
        out = ip.rotate(gray(a), 90.0).pixels[:, :, 0]
        assert out[0, 4] == 0  # now above center

    def test_round_trip_iou(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            img = render_glyph(int(rng.integers(0, 20)), rng)
            back = ip.deskew(ip.deskew(img, 7.0), -7.0)
            assert iou(ink(img), ink(back)) >= 0.95

    def test_limit(self):
        with pytest.raises(ValueError):
            ip.deskew(gray(np.zeros((4, 4))), 50.0)


class TestDilate:
    def test_identity(self, rng):
        img = gray(rng.integers(0, 256, size=(6, 6)))
        assert np.array_equal(ip.dilate(img, 1).pixels, img.pixels)

    def test_single_pixel(self):
        a = np.full((7, 7), 255)
        a[3, 3] = 0
        out = ip.dilate(gray(a), 3).pixels[:, :, 0]
        want = np.full((7, 7), 255)
        want[2:5, 2:5] = 0
        assert np.array_equal(out, want)

    def test_oracle(self):
        r = np.random.default_rng(11)
        for _ in range(120):
            a = (r.random((16, 16)) < 0.5).astype(np.uint8) * 255
            k = int(r.choice([3, 5]))
            assert np.array_equal(ip.dilate(gray(a), k).pixels[:, :, 0], oracles.min_filter(a, k))

    def test_extensive_and_monotone(self, rng):
        a = (rng.random((16, 16)) < 0.2).astype(np.uint8) * 255
        once = ip.dilate(gray(a), 3)
        twice = ip.dilate(once, 3)
        assert np.all(ink(once) >= ink(gray(a)))
        assert np.all(ink(twice) >= ink(once))

    def test_even_kernel(self):
        with pytest.raises(ValueError):
            ip.dilate(gray(np.zeros((4, 4))), 2)


class TestResize:
    def test_same_size(self, rng):
        img = gray(rng.integers(0, 256, size=(5, 6)))
        assert np.array_equal(ip.resize(img, 5, 6).pixels, img.pixels)

    def test_constant(self):
        out = ip.resize(gray(np.full((5, 7), 77)), 13, 4).pixels
        assert np.all(out == 77)

    def test_checkerboard(self):
        out = ip.resize(gray([[0, 255], [255, 0]]), 3, 3).pixels[:, :, 0]
        assert out[1, 1] in (127, 128)
        want = np.clip(np.rint(oracles.bilinear_resize(np.array([[0, 255], [255, 0]]), 3, 3)), 0, 255)
        assert np.array_equal(out, want)

    def test_oracle(self):
        from mhcaf import _kernels

        r = np.random.default_rng(13)
        for _ in range(120):
            h, w = int(r.integers(1, 9)), int(r.integers(1, 9))
            oh, ow = int(r.integers(1, 12)), int(r.integers(1, 12))
            a = r.integers(0, 256, size=(h, w)).astype(np.uint8)
            want = oracles.bilinear_resize(a, oh, ow)
            sy, sx = np.meshgrid(ip._axis_coords(h, oh), ip._axis_coords(w, ow), indexing="ij")
            got = _kernels.bilinear_sample(a.astype(np.float64), sy, sx, 0.0)
            np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)
            out = ip.resize(gray(a), oh, ow).pixels[:, :, 0]
            if (oh, ow) != (h, w):
                safe = np.abs(want - np.floor(want) - 0.5) > 1e-9
                assert np.array_equal(out[safe], np.rint(want)[safe])


class TestNormalize:
    def test_bgr_swap(self):
        img = Image(np.array([[[255, 0, 0]]], dtype=np.uint8), "BGR")
        np.testing.assert_array_equal(ip.to_rgb_normalized(img)[0, 0], [0.0, 0.0, 1.0])

    def test_zero(self):
        assert not ip.to_rgb_normalized(Image(np.zeros((3, 3, 3), np.uint8), "RGB")).any()

    def test_128(self):
        v = ip.to_rgb_normalized(gray([[128]]))
        assert v.shape == (1, 1, 3)
        assert np.all(v == 128 / 255) and abs(v[0, 0, 0] - 0.50196) < 1e-5


class TestPipeline:
    def test_all_disabled(self, rng):
        img = Image(rng.integers(0, 256, size=(128, 128, 3)).astype(np.uint8), "RGB")
        cfg = PipelineConfig(blur=False, deskew=False, dilate=False, resize=False)
        assert np.array_equal(ip.preprocess_pipeline(img, cfg), ip.to_rgb_normalized(img))

    @pytest.mark.parametrize("shape", [(64, 90), (128, 128), (200, 150)])
    def test_contract(self, shape):
        img = render_glyph(2, np.random.default_rng(0), size=max(shape))
        img = gray(img.pixels[: shape[0], : shape[1], 0])
        out = ip.preprocess_pipeline(img)
        assert out.shape == (128, 128, 3)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_ink_grows(self):
        img = render_glyph(4, np.random.default_rng(1), skew=6.0, thickness=3)
        stages = {}
        out = ip.preprocess_pipeline(img, stages=stages)
        assert set(stages) == {"input", "blur", "deskew", "dilate", "resize"}
        assert (out[:, :, 0] < 0.5).sum() >= ink(img).sum()

    def test_image_validation(self):
        with pytest.raises(ValueError):
            Image(np.zeros((3, 3, 3), np.uint8), "GRAY")


def test_load_save_round_trip(tmp_path, rng):
    bgr = Image(rng.integers(0, 256, size=(5, 6, 3)).astype(np.uint8), "BGR")
    ip.save_png(bgr, tmp_path / "a.png")
    back = ip.load_image(tmp_path / "a.png")
    assert back.order == "BGR" and np.array_equal(back.pixels, bgr.pixels)
    (tmp_path / "bad.png").write_bytes(b"not an image")
    with pytest.raises(ValueError, match="cannot decode"):
        ip.load_image(tmp_path / "bad.png")
