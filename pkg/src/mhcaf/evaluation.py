"""Classification metrics, per-class reports and stratified k-fold cross-validation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError("y_true and y_pred differ in length")
    if y_true.size and (min(y_true.min(), y_pred.min()) < 0 or max(y_true.max(), y_pred.max()) >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return np.bincount(y_true * n_classes + y_pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def _safe_div(num: float, den: float, flags: list, what: str) -> float:
    if den == 0:
        flags.append(what)
        return 0.0
    return num / den


def mcc(cm: np.ndarray) -> float:
    """Multiclass Matthews correlation from the confusion matrix (0 when undefined)."""
    cm = np.asarray(cm, dtype=np.float64)
    s = cm.sum()
    c = np.trace(cm)
    t = cm.sum(axis=1)
    p = cm.sum(axis=0)
    den = math.sqrt((s * s - p @ p) * (s * s - t @ t))
    return 0.0 if den == 0 else float((c * s - t @ p) / den)


def cohen_kappa(cm: np.ndarray) -> float:
    """``(p_o - p_e) / (1 - p_e)`` (0 when ``p_e == 1``)."""
    cm = np.asarray(cm, dtype=np.float64)
    s = cm.sum()
    po = np.trace(cm) / s
    pe = (cm.sum(axis=1) @ cm.sum(axis=0)) / (s * s)
    return 0.0 if pe == 1.0 else float((po - pe) / (1.0 - pe))


def auc_binary(scores, positive) -> float:
    """Mann-Whitney U / (n_pos * n_neg) with mid-ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative sample")
    ranks = rankdata(scores)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def macro_auc(y_true, scores) -> tuple[float, list[int]]:
    """Mean one-vs-rest AUC over classes that have both positives and negatives.

    Returns ``(auc, skipped_classes)``.
    """
    y_true = np.asarray(y_true)
    scores = np.asarray(scores, dtype=np.float64)
    vals, skipped = [], []
    for k in range(scores.shape[1]):
        pos = y_true == k
        if pos.all() or not pos.any():
            skipped.append(k)
            continue
        vals.append(auc_binary(scores[:, k], pos))
    if not vals:
        raise ValueError("no class has both positive and negative samples")
    return float(np.mean(vals)), skipped


@dataclass
class EvalReport:
    confusion: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    class_accuracy: np.ndarray
    support: np.ndarray
    accuracy: float
    error_rate: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    mcc: float
    kappa: float
    macro_auc: float | None = None
    zero_division: list = field(default_factory=list)

    AGGREGATES = (
        "accuracy", "error_rate", "macro_precision", "macro_recall", "macro_f1",
        "weighted_precision", "weighted_recall", "weighted_f1", "mcc", "kappa", "macro_auc",
    )

    def summary(self) -> dict:
        return {k: getattr(self, k) for k in self.AGGREGATES}


def compute_metrics(cm, y_true=None, scores=None) -> EvalReport:
    """Metrics from a confusion matrix; AUC needs per-sample ``scores`` and ``y_true``.

    Undefined per-class ratios are reported as 0 and listed in ``zero_division``.
    Without scores ``macro_auc`` is None.
    """
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    n = cm.shape[0]
    tp = np.diag(cm).astype(np.float64)
    pred = cm.sum(axis=0).astype(np.float64)
    true = cm.sum(axis=1).astype(np.float64)
    flags: list = []
    prec = np.array([_safe_div(tp[k], pred[k], flags, f"precision[{k}]") for k in range(n)])
    rec = np.array([_safe_div(tp[k], true[k], flags, f"recall[{k}]") for k in range(n)])
    f1 = np.array([_safe_div(2 * prec[k] * rec[k], prec[k] + rec[k], flags, f"f1[{k}]") for k in range(n)])
    tn = total - pred - true + tp
    acc = float(np.trace(cm)) / total
    auc = None
    if scores is not None:
        if y_true is None:
            raise ValueError("AUC needs y_true together with scores")
        auc, skipped = macro_auc(y_true, scores)
        flags += [f"auc[{k}]" for k in skipped]
    w = true / total
    return EvalReport(
        confusion=cm,
        precision=prec,
        recall=rec,
        f1=f1,
        class_accuracy=(tp + tn) / total,
        support=true.astype(np.int64),
        accuracy=acc,
        error_rate=1.0 - acc,
        macro_precision=float(prec.mean()),
        macro_recall=float(rec.mean()),
        macro_f1=float(f1.mean()),
        weighted_precision=float(w @ prec),
        weighted_recall=float(w @ rec),
        weighted_f1=float(w @ f1),
        mcc=mcc(cm),
        kappa=cohen_kappa(cm),
        macro_auc=auc,
        zero_division=flags,
    )


def evaluate(y_true, probs, n_classes: int) -> EvalReport:
    probs = np.asarray(probs)
    cm = confusion_matrix(y_true, probs.argmax(axis=1), n_classes)
    return compute_metrics(cm, y_true, probs)


def _fmt(v) -> str:
    if v is None:
        return "NA"
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_report_csv(report: EvalReport, path: str | Path, class_names=None) -> None:
    """One row per class, then one ``metric,value`` row per aggregate."""
    n = len(report.precision)
    names = list(class_names) if class_names is not None else [str(k) for k in range(n)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "precision", "recall", "f1", "accuracy", "support"])
        for k in range(n):
            w.writerow(
                [names[k], _fmt(report.precision[k]), _fmt(report.recall[k]), _fmt(report.f1[k]),
                 _fmt(report.class_accuracy[k]), int(report.support[k])]
            )
        w.writerow([])
        w.writerow(["metric", "value"])
        for k, v in report.summary().items():
            w.writerow([k, _fmt(v)])
        if report.zero_division:
            w.writerow(["zero_division", ";".join(report.zero_division)])


def write_confusion_csv(cm: np.ndarray, path: str | Path, class_names=None) -> None:
    n = cm.shape[0]
    names = list(class_names) if class_names is not None else [str(k) for k in range(n)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred", *names])
        for k in range(n):
            w.writerow([names[k], *(int(v) for v in cm[k])])


# ---------------------------------------------------------------------------
# k-fold
# ---------------------------------------------------------------------------


def stratified_kfold(labels, k: int = 5, seed: int = 0) -> list[np.ndarray]:
    """Shuffle each class with ``seed`` and deal its members round-robin over ``k`` folds.

    The dealing position carries over from one class to the next so fold
    totals stay within one sample of each other as well.
    """
    labels = np.asarray(labels)
    if k < 2:
        raise ValueError("k must be at least 2")
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    start = 0
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if idx.size < k:
            raise ValueError(f"class {c} has {idx.size} samples, fewer than k={k}")
        idx = idx[rng.permutation(idx.size)]
        for j, i in enumerate(idx):
            folds[(start + j) % k].append(int(i))
        start = (start + idx.size) % k
    return [np.sort(np.asarray(f, dtype=np.int64)) for f in folds]


@dataclass
class KFoldResult:
    reports: list[EvalReport]
    mean: dict
    std: dict


def summarize_folds(reports: list[EvalReport]) -> tuple[dict, dict]:
    """Arithmetic mean and population standard deviation of each aggregate metric."""
    mean, std = {}, {}
    for key in EvalReport.AGGREGATES:
        vals = [getattr(r, key) for r in reports]
        if any(v is None for v in vals):
            mean[key] = std[key] = None
            continue
        arr = np.asarray(vals, dtype=np.float64)
        mean[key] = float(arr.sum() / arr.size)
        std[key] = float(np.sqrt(((arr - mean[key]) ** 2).sum() / arr.size))
    return mean, std


def run_kfold(x_u8, y, run_cfg, k: int | None = None, out_dir=None, verbose: bool = False) -> KFoldResult:
    """Train a fresh model per fold (seed ``seed + fold``) and evaluate it on the held-out fold.

    Within the k-1 training folds a stratified validation slice drives
    early stopping and the learning-rate schedule.
    """
    import copy

    from . import training
    from .data import stratified_split

    y = np.asarray(y, dtype=np.int64)
    k = k or run_cfg.run.kfold
    n_classes = int(y.max()) + 1
    base_seed = run_cfg.train.seed
    folds = stratified_kfold(y, k, base_seed)
    reports = []
    for i, test_idx in enumerate(folds):
        cfg = copy.deepcopy(run_cfg)
        cfg.train.seed = base_seed + i
        pool = np.sort(np.concatenate([f for j, f in enumerate(folds) if j != i]))
        parts = stratified_split(y[pool], cfg.train.seed, cfg.train.val_fraction, 0.0)
        tr = pool[np.concatenate([parts["train"], parts["test"]])]
        va = pool[parts["val"]]
        model = training.build_model(cfg, n_classes)
        fold_dir = Path(out_dir) / f"fold{i + 1}" if out_dir is not None else None
        training.train(model, x_u8[tr], y[tr], x_u8[va], y[va], cfg.train, fold_dir, cfg,
                       num_classes=n_classes, verbose=verbose)
        logits = training.predict_logits(model, x_u8[test_idx])
        probs = training.softmax(logits).data
        reports.append(evaluate(y[test_idx], probs, n_classes))
    mean, std = summarize_folds(reports)
    result = KFoldResult(reports, mean, std)
    if out_dir is not None:
        write_kfold_csv(result, Path(out_dir) / "kfold.csv")
    return result


def write_kfold_csv(result: KFoldResult, path: str | Path) -> None:
    keys = EvalReport.AGGREGATES
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", *keys])
        for i, r in enumerate(result.reports):
            w.writerow([i + 1, *(_fmt(getattr(r, k)) for k in keys)])
        w.writerow(["mean", *(_fmt(result.mean[k]) for k in keys)])
        w.writerow(["std", *(_fmt(result.std[k]) for k in keys)])
