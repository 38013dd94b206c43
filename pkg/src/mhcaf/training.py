"""Optimizer, schedules, class weighting and the training loop."""

from __future__ import annotations

import csv
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint, ops
from .config import RunConfig, TrainConfig
from .data import to_float
from .model import MHCAFNet
from .nn import Module
from .tensor import get_default_dtype, no_grad

softmax = ops.softmax
cross_entropy = ops.cross_entropy

LOG_FIELDS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr")


class NumericError(ArithmeticError):
    """Non-finite loss during training (CLI exit code 3)."""


def class_weights(counts, names=None) -> np.ndarray:
    """Balanced weights ``N / (C * n_c)``; every class needs at least one sample."""
    counts = np.asarray(counts, dtype=np.int64)
    for c, n in enumerate(counts):
        if n < 1:
            label = names[c] if names is not None else c
            raise ValueError(f"class {label} has no samples; cannot weight it")
    return counts.sum() / (len(counts) * counts.astype(np.float64))


class Adam:
    """Adam with bias correction over the trainable parameters of a model.

    A parameter whose gradient is identically zero is skipped for that step:
    its value and moments stay as they are, so an all-zero gradient is a no-op
    whatever the optimizer state.  The step counter still advances.
    """

    def __init__(self, named_params, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = OrderedDict((n, p) for n, p in named_params if getattr(p, "trainable", True))
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = OrderedDict((n, np.zeros_like(p.data)) for n, p in self.params.items())
        self.v = OrderedDict((n, np.zeros_like(p.data)) for n, p in self.params.items())

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise ValueError(f"parameter {name} has no gradient; run backward first")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            if not g.any():
                continue
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = np.zeros_like(p.data)

    def state(self) -> dict:
        st: OrderedDict[str, np.ndarray] = OrderedDict()
        for n in self.params:
            st[f"m.{n}"] = self.m[n].copy()
        for n in self.params:
            st[f"v.{n}"] = self.v[n].copy()
        return {"t": self.t, "lr": self.lr, "state": st}

    def load_state(self, state: dict) -> None:
        st = state["state"]
        for n, p in self.params.items():
            for key, store in ((f"m.{n}", self.m), (f"v.{n}", self.v)):
                if key not in st:
                    raise KeyError(f"optimizer state lacks {key}")
                if st[key].shape != p.data.shape:
                    raise ValueError(f"optimizer state {key}: checkpoint {st[key].shape} vs model {p.data.shape}")
                store[n] = np.array(st[key], dtype=p.data.dtype)
        self.t = int(state["t"])
        self.lr = float(state["lr"])


@dataclass
class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without strict improvement."""

    lr: float
    factor: float = 0.5
    patience: int = 7
    tol: float = 1e-6
    best: float = -math.inf
    counter: int = 0

    def step(self, metric: float) -> float:
        if metric > self.best + self.tol:
            self.best = metric
            self.counter = 0
        else:
            self.counter += 1
            if self.counter >= self.patience:
                self.lr *= self.factor
                self.counter = 0
        return self.lr


@dataclass
class EarlyStopping:
    """Signals a stop once ``patience`` consecutive epochs fail to improve strictly."""

    patience: int = 15
    tol: float = 1e-6
    best: float = -math.inf
    best_epoch: int = 0
    counter: int = 0

    def step(self, metric: float, epoch: int) -> bool:
        """Returns True when training should stop after ``epoch``."""
        if metric > self.best + self.tol:
            self.best = metric
            self.best_epoch = epoch
            self.counter = 0
            return False
        self.counter += 1
        return self.counter >= self.patience

    @property
    def improved(self) -> bool:
        return self.counter == 0


def batch_indices(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled minibatches; a trailing batch of one joins the previous batch (batch norm needs two)."""
    perm = rng.permutation(n)
    batches = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        last = batches.pop()
        batches[-1] = np.concatenate([batches[-1], last])
    return batches


def predict_logits(model: Module, x_u8: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode logits for a uint8 image stack."""
    was = model.training
    model.eval()
    outs = []
    with no_grad():
        for i in range(0, len(x_u8), batch_size):
            outs.append(model(to_float(x_u8[i : i + batch_size], get_default_dtype())).data)
    model.train(was)
    return np.concatenate(outs) if outs else np.zeros((0, 0))


def _eval_loss_acc(logits: np.ndarray, y: np.ndarray, weights) -> tuple[float, float]:
    loss = float(ops.softmax_cross_entropy(logits, y, weights).data)
    return loss, float(np.mean(logits.argmax(axis=1) == y))


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = 0.0
    initial_loss: float = float("nan")
    stopped_early: bool = False
    seconds: float = 0.0
    optimizer: Adam | None = None


def build_model(cfg: RunConfig, num_classes: int) -> MHCAFNet:
    cfg.model.num_classes = num_classes
    return MHCAFNet(cfg.model, cfg.fusion, seed=cfg.train.seed)


def train(
    model: MHCAFNet,
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_val: np.ndarray,
    y_val: np.ndarray,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    run_config: RunConfig | None = None,
    classes: list | None = None,
    num_classes: int | None = None,
    verbose: bool = False,
) -> TrainResult:
    """Minibatch Adam on uint8 image stacks; restores the best-validation weights at the end.

    With ``out_dir`` set, ``metrics.csv`` gains one row per epoch and
    ``best.ckpt`` is rewritten whenever validation accuracy improves.
    """
    cfg.validate()
    if len(x_train) == 0 or len(x_val) == 0:
        raise ValueError("training and validation splits must be non-empty")
    n_cls = num_classes or int(max(y_train.max(), y_val.max())) + 1
    if cfg.class_weighting:
        weights = class_weights(np.bincount(y_train, minlength=n_cls), classes)
    else:
        weights = np.ones(n_cls)
    dtype = get_default_dtype()
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    model.reseed_dropout(cfg.seed)
    opt = Adam(model.named_parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    sched = PlateauScheduler(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.improve_tol)
    stopper = EarlyStopping(cfg.early_stop_patience, cfg.improve_tol)
    result = TrainResult(optimizer=opt)
    best_state = None

    log_path = ckpt_path = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        log_path, ckpt_path = out / "metrics.csv", out / "best.ckpt"
        with open(log_path, "w", newline="") as fh:
            csv.writer(fh).writerow(LOG_FIELDS)

    t0 = time.perf_counter()
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        loss_sum = 0.0
        correct = 0
        seen = 0
        for idx in batch_indices(len(x_train), cfg.batch_size, shuffle_rng):
            xb = to_float(x_train[idx], dtype)
            yb = y_train[idx]
            opt.zero_grad()
            logits = model(xb)
            loss = ops.softmax_cross_entropy(logits, yb, weights)
            lv = float(loss.data)
            if not math.isfinite(lv):
                raise NumericError(f"non-finite training loss {lv} at epoch {epoch}")
            if seen == 0 and epoch == 1:
                result.initial_loss = lv
            loss.backward()
            opt.step()
            loss_sum += lv * len(idx)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
            seen += len(idx)
        val_loss, val_acc = _eval_loss_acc(predict_logits(model, x_val), y_val, weights)
        row = {
            "epoch": epoch,
            "train_loss": loss_sum / seen,
            "train_acc": correct / seen,
            "val_loss": val_loss,
            "val_acc": val_acc,
            "lr": opt.lr,
        }
        result.history.append(row)
        if log_path is not None:
            with open(log_path, "a", newline="") as fh:
                csv.writer(fh).writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in LOG_FIELDS])
        if verbose:
            print(
                f"epoch {epoch:3d} loss {row['train_loss']:.4f} acc {row['train_acc']:.3f} "
                f"val_loss {val_loss:.4f} val_acc {val_acc:.3f} lr {opt.lr:.2e} ({time.perf_counter() - t0:.0f}s)",
                flush=True,
            )

        stop = stopper.step(val_acc, epoch)
        if stopper.improved:
            best_state = (model.state_dict(), opt.state())
            if ckpt_path is not None:
                save_model(ckpt_path, model, opt, epoch, val_acc, run_config, classes)
        opt.lr = sched.step(val_acc)
        if stop:
            result.stopped_early = True
            break

    if best_state is not None:
        model.load_state_dict(best_state[0])
    result.best_epoch = stopper.best_epoch
    result.best_val_acc = stopper.best
    result.seconds = time.perf_counter() - t0
    return result


def save_model(path, model: Module, opt: Adam | None, epoch: int, best_val_acc: float, run_config=None, classes=None):
    ck = checkpoint.Checkpoint(
        tensors=model.state_dict(),
        optimizer=opt.state() if opt is not None else None,
        epoch=epoch,
        best_val_acc=best_val_acc,
        config=run_config.to_flat() if run_config is not None else {},
        classes=list(classes) if classes is not None else [],
    )
    checkpoint.save(path, ck)


def load_model(path) -> tuple[MHCAFNet, checkpoint.Checkpoint, RunConfig]:
    """Rebuild the network described by a checkpoint and load its weights."""
    ck = checkpoint.load(path)
    cfg = RunConfig.from_flat(ck.config) if ck.config else RunConfig()
    model = MHCAFNet(cfg.model, cfg.fusion, seed=cfg.train.seed)
    model.load_state_dict(ck.tensors)
    return model, ck, cfg
