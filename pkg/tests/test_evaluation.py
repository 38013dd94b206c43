import math

import numpy as np
import pytest

from mhcaf import evaluation as ev

import oracles
from conftest import toy_images, toy_run_config


class TestMetrics:
    def test_perfect(self):
        r = ev.compute_metrics(np.diag([3, 4, 5]))
        assert r.accuracy == 1.0 and r.mcc == 1.0 and r.kappa == 1.0
        assert np.all(r.f1 == 1.0)

    def test_independent_balanced(self):
        r = ev.compute_metrics(np.full((2, 2), 5))
        assert r.kappa == 0.0 and r.mcc == 0.0

    def test_5_1_2_4(self):
        cm = np.array([[5, 1], [2, 4]])
        r = ev.compute_metrics(cm)
        assert r.accuracy == 0.75
        p = [5 / 7, 4 / 5]
        rc = [5 / 6, 4 / 6]
        f1 = [2 * a * b / (a + b) for a, b in zip(p, rc)]
        np.testing.assert_allclose(r.precision, p, rtol=0, atol=1e-12)
        np.testing.assert_allclose(r.recall, rc, rtol=0, atol=1e-12)
        np.testing.assert_allclose(r.f1, f1, rtol=0, atol=1e-12)
        assert abs(r.macro_f1 - sum(f1) / 2) < 1e-12
        assert abs(r.weighted_f1 - (6 * f1[0] + 6 * f1[1]) / 12) < 1e-12
        tp, fn, fp, tn = 5, 1, 2, 4
        mcc = (tp * tn - fp * fn) / math.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
        assert abs(r.mcc - mcc) < 1e-12
        po, pe = 9 / 12, (6 * 7 + 6 * 5) / 144
        assert abs(r.kappa - (po - pe) / (1 - pe)) < 1e-12
        np.testing.assert_allclose(r.class_accuracy, [0.75, 0.75], rtol=0, atol=1e-15)

    def test_zero_division_flagged(self):
        r = ev.compute_metrics(np.array([[3, 0], [2, 0]]))
        assert r.precision[1] == 0.0 and "precision[1]" in r.zero_division

    def test_confusion_range(self):
        with pytest.raises(ValueError):
            ev.confusion_matrix([0, 3], [0, 1], 3)


def test_mcc_kappa_auc_oracles():
    r = np.random.default_rng(21)
    for _ in range(150):
        n = int(r.integers(2, 5))
        m = int(r.integers(n + 2, 30))
        y = r.integers(0, n, size=m)
        y[:n] = np.arange(n)  # every class present
        scores = r.random((m, n))
        if r.random() < 0.3:
            scores = np.round(scores, 1)  # ties
        pred = scores.argmax(axis=1)
        cm = ev.confusion_matrix(y, pred, n)
        assert abs(ev.mcc(cm) - oracles.mcc(y, pred, n)) <= 1e-12
        assert abs(ev.cohen_kappa(cm) - oracles.kappa(y, pred, n)) <= 1e-12
        auc, _ = ev.macro_auc(y, scores)
        assert abs(auc - oracles.macro_auc(y, scores)) <= 1e-12


def test_auc_extremes():
    y = np.array([0, 1, 2, 0, 1, 2])
    assert ev.macro_auc(y, np.eye(3)[y])[0] == 1.0
    assert ev.macro_auc(y, np.full((6, 3), 1 / 3))[0] == 0.5


def test_auc_skips_absent_class():
    auc, skipped = ev.macro_auc(np.array([0, 1, 0, 1]), np.random.default_rng(0).random((4, 3)))
    assert skipped == [2]


class TestKFold:
    def check_plan(self, labels, folds, k):
        ids = np.concatenate(folds)
        assert np.array_equal(np.sort(ids), np.arange(len(labels)))
        for c in np.unique(labels):
            per = [int((labels[f] == c).sum()) for f in folds]
            assert max(per) - min(per) <= 1

    def test_invariants_1000(self):
        r = np.random.default_rng(8)
        for _ in range(1000):
            n_cls = int(r.integers(1, 6))
            counts = r.integers(5, 15, size=n_cls)
            labels = r.permutation(np.repeat(np.arange(n_cls), counts))
            folds = ev.stratified_kfold(labels, 5, int(r.integers(0, 1 << 30)))
            self.check_plan(labels, folds, 5)
            sizes = [len(f) for f in folds]
            assert max(sizes) - min(sizes) <= 1

    def test_single_class(self):
        assert [len(f) for f in ev.stratified_kfold(np.zeros(10, int), 5)] == [2] * 5

    def test_released_counts(self):
        labels = np.repeat(np.arange(78), 650)
        for f in ev.stratified_kfold(labels, 5, 0):
            assert np.all(np.bincount(labels[f], minlength=78) == 130)

    def test_too_few(self):
        with pytest.raises(ValueError, match="class 1"):
            ev.stratified_kfold(np.array([0] * 5 + [1] * 4), 5)

    def test_summary_is_mean(self):
        r = np.random.default_rng(0)
        reports = [ev.compute_metrics(r.integers(1, 9, size=(3, 3))) for _ in range(5)]
        mean, std = ev.summarize_folds(reports)
        accs = [rep.accuracy for rep in reports]
        assert abs(mean["accuracy"] - sum(accs) / 5) <= 1e-12
        assert abs(std["accuracy"] - float(np.std(accs))) <= 1e-12


def test_run_kfold_toy(tmp_path):
    cfg = toy_run_config(max_epochs=1)
    x, y = toy_images(per_class=10)
    res = ev.run_kfold(x, y, cfg, 5, tmp_path)
    assert len(res.reports) == 5
    for rep in res.reports:
        assert rep.macro_auc is not None and rep.confusion.sum() == 6
    accs = [rep.accuracy for rep in res.reports]
    assert abs(res.mean["accuracy"] - sum(accs) / 5) <= 1e-12
    rows = (tmp_path / "kfold.csv").read_text().splitlines()
    assert rows[0].startswith("fold,accuracy") and rows[-2].startswith("mean,") and len(rows) == 8


def test_report_csv(tmp_path):
    r = ev.evaluate(np.array([0, 1, 1]), np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]]), 2)
    ev.write_report_csv(r, tmp_path / "r.csv", ["ka", "kha"])
    ev.write_confusion_csv(r.confusion, tmp_path / "c.csv", ["ka", "kha"])
    text = (tmp_path / "r.csv").read_text()
    assert text.startswith("class,precision") and "ka," in text and "mcc," in text
    assert (tmp_path / "c.csv").read_text().splitlines()[1] == "ka,1,0"
