from __future__ import annotations

import numpy as np
import pytest

from mhcaf import tensor


@pytest.fixture(autouse=True)
def _float64():
    tensor.set_default_dtype("float64")
    yield
    tensor.set_default_dtype("float64")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def uniform(rng, *shape, requires_grad=True):
    """Leaf tensor with entries drawn from U[-1, 1]."""
    return tensor.Tensor(rng.uniform(-1.0, 1.0, size=shape), requires_grad=requires_grad)


def small_model_config(**kw):
    """A scaled-down model: 16x16 input, stem ending at 2x2, token width 8 over 4 tokens."""
    from mhcaf.config import ModelConfig

    base = dict(
        image_size=16,
        num_classes=3,
        stem_widths=(4, 8),
        stem_strides=(1, 2),
        expansion=2,
        patch=8,
        embed_dim=8,
        heads=2,
        vit_depth=1,
        vit_ff=16,
        conf_depth=1,
        conf_ff=16,
        feat_dim=8,
        head_widths=(8, 4),
        cnn_dropout=0.0,
        vit_dropout=0.0,
        conf_dropout=0.0,
        head_dropout=0.0,
    )
    base.update(kw)
    return ModelConfig(**base)


def readout(out, seed=0):
    """Scalar ``sum(out * w)`` with a fixed random ``w``; keeps all outputs in the loss."""
    w = np.random.default_rng(seed).normal(size=out.shape)
    return tensor.tsum(out * w)


def toy_run_config(num_classes=3, **train):
    """RunConfig for quick training runs on 16x16 images."""
    from mhcaf.config import RunConfig

    cfg = RunConfig()
    cfg.model = small_model_config(num_classes=num_classes)
    cfg.fusion.heads = 2
    cfg.train.batch_size = 8
    cfg.train.max_epochs = 2
    for k, v in train.items():
        setattr(cfg.train, k, v)
    return cfg


def toy_images(num_classes=3, per_class=10, size=16, seed=0):
    """Separable uint8 stacks: class ``c`` is bright in horizontal band ``c``."""
    r = np.random.default_rng(seed)
    xs, ys = [], []
    band = size // num_classes
    for c in range(num_classes):
        for _ in range(per_class):
            img = r.integers(0, 60, size=(size, size, 3))
            img[c * band : (c + 1) * band] += 180
            xs.append(img)
            ys.append(c)
    return np.clip(np.asarray(xs), 0, 255).astype(np.uint8), np.asarray(ys, dtype=np.int64)


# ---------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per @pytest.mark.criterion test
# ---------------------------------------------------------------------------

_CRITERIA: dict = {}
_OUTCOMES: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            _CRITERIA[item.nodeid] = mark.args


def pytest_runtest_logreport(report):
    if report.nodeid not in _CRITERIA:
        return
    if report.failed:
        _OUTCOMES[report.nodeid] = "FAIL"
    elif report.when == "call" and report.nodeid not in _OUTCOMES:
        _OUTCOMES[report.nodeid] = "SKIP" if report.skipped else "PASS"


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, (number, title) in sorted(_CRITERIA.items(), key=lambda kv: kv[1][0]):
        status = _OUTCOMES.get(nodeid, "NOT RUN")
        terminalreporter.write_line(f"criterion {number:2d}: {status:4s}  {title}")
