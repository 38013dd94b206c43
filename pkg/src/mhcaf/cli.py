"""Command-line entry point: ``mhcaf <preprocess|train|eval|kfold|gradcam>``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, data, evaluation, gradcam, imageproc, training
from .config import RunConfig, dump_config, load_config

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("preprocess", "train", "eval", "kfold", "gradcam")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mhcaf", description="Multi-branch handwritten character classifier.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--data", help="dataset root: one sub-folder per class")
    p.add_argument("--out", help="output directory (default: run.out)")
    p.add_argument("--seed", type=int, help="training seed")
    p.add_argument("--synthetic", metavar="CxN", help="generate C classes x N glyphs instead of --data")
    p.add_argument("--checkpoint", help="checkpoint for eval/gradcam (default: OUT/best.ckpt)")
    p.add_argument("--dump-stages", metavar="DIR", help="preprocess: also write per-stage PNGs")
    p.add_argument("--layer", help="gradcam: feature map to explain (default: run.gradcam_layer)")
    p.add_argument("--target", type=int, help="gradcam: class to explain (default: predicted)")
    p.add_argument("--limit", type=int, default=8, help="gradcam: test images used when no inputs are given")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("items", nargs="*", help="key=value overrides; gradcam also takes image paths")
    return p


def worker_count() -> int:
    raw = os.environ.get("MHCAF_THREADS", "")
    try:
        n = int(raw) if raw else (os.cpu_count() or 1)
    except ValueError:
        raise UsageError(f"MHCAF_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def resolve_config(args) -> tuple[RunConfig, list[Path]]:
    cfg = RunConfig()
    if args.config:
        if not Path(args.config).is_file():
            raise UsageError(f"config file not found: {args.config}")
        load_config(args.config, cfg)
    inputs = []
    for item in args.items:
        if "=" in item:
            k, v = item.split("=", 1)
            cfg.set(k, v)
        else:
            inputs.append(Path(item))
    if args.data:
        cfg.run.data = args.data
    if args.out:
        cfg.run.out = args.out
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.synthetic:
        cfg.run.synthetic = args.synthetic
    cfg.validate()
    if cfg.run.synthetic:
        data.parse_synthetic(cfg.run.synthetic)
    return cfg, inputs


def dataset_root(cfg: RunConfig) -> Path:
    """The configured dataset, generating the synthetic corpus first when asked."""
    if cfg.run.synthetic:
        c, n = data.parse_synthetic(cfg.run.synthetic)
        root = Path(cfg.run.out) / f"synthetic_{c}x{n}_s{cfg.train.seed}"
        if not (root / ".complete").exists():
            data.write_synthetic_corpus(root, c, n, cfg.train.seed)
            (root / ".complete").write_text("")
        return root
    if not cfg.run.data:
        raise data.DataError("no dataset given: pass --data DIR or --synthetic CxN")
    root = Path(cfg.run.data)
    if not root.is_dir():
        raise data.DataError(f"dataset directory not found: {root}")
    return root


def _load_split(cfg, manifest, name, log):
    paths, labels = manifest.subset(name)
    log(f"preprocessing {len(paths)} {name} images")
    x = data.load_images(paths, cfg.pipeline, Path(cfg.run.out) / "cache", worker_count())
    return x, labels


def _manifest(cfg) -> data.Manifest:
    return data.load_dataset(dataset_root(cfg), cfg.run.split_seed, cfg.train.val_fraction, cfg.train.test_fraction)


def _tag(path: Path) -> str:
    # file stems repeat across class folders, so keep the folder in output names
    return f"{path.parent.name}_{path.stem}" if path.parent.name else path.stem


def cmd_preprocess(cfg, args, inputs, log) -> int:
    out = Path(cfg.run.out) / "preprocessed"
    manifest = _manifest(cfg)
    dump = Path(args.dump_stages) if args.dump_stages else None
    if dump is not None:
        dump.mkdir(parents=True, exist_ok=True)
    for path, label in zip(manifest.files, manifest.labels):
        try:
            img = imageproc.load_image(path)
        except ValueError as exc:
            raise data.DataError(str(exc)) from None
        stages: dict | None = {} if dump is not None else None
        arr = data.preprocess_u8(img, cfg.pipeline) if stages is None else None
        if stages is not None:
            norm = imageproc.preprocess_pipeline(img, cfg.pipeline, stages)
            arr = np.rint(norm * 255.0).astype(np.uint8)
            for stage, simg in stages.items():
                imageproc.save_png(simg, dump / f"{_tag(path)}.{stage}.png")
        dst = out / manifest.classes[label] / (path.stem + ".png")
        dst.parent.mkdir(parents=True, exist_ok=True)
        imageproc.save_png(imageproc.Image(arr, "RGB"), dst)
    log(f"wrote {len(manifest.files)} images under {out}")
    return EXIT_OK


def cmd_train(cfg, args, inputs, log) -> int:
    manifest = _manifest(cfg)
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))
    xtr, ytr = _load_split(cfg, manifest, "train", log)
    xva, yva = _load_split(cfg, manifest, "val", log)
    model = training.build_model(cfg, manifest.num_classes)
    res = training.train(
        model, xtr, ytr, xva, yva, cfg.train, out, cfg, manifest.classes, manifest.num_classes, verbose=not args.quiet
    )
    log(f"best epoch {res.best_epoch} val_acc {res.best_val_acc:.4f} ({res.seconds:.0f}s)")
    return EXIT_OK


def _load_checkpoint(cfg, args):
    path = Path(args.checkpoint) if args.checkpoint else Path(cfg.run.out) / "best.ckpt"
    if not path.is_file():
        raise data.DataError(f"checkpoint not found: {path}")
    try:
        return training.load_model(path)
    except (checkpoint.CheckpointError, KeyError, ValueError) as exc:
        raise data.DataError(f"cannot load checkpoint {path}: {exc}") from None


def cmd_eval(cfg, args, inputs, log) -> int:
    model, ck, ck_cfg = _load_checkpoint(cfg, args)
    ck_cfg.run = cfg.run
    manifest = _manifest(ck_cfg)
    if ck.classes and list(ck.classes) != manifest.classes:
        raise data.DataError("dataset classes differ from the checkpoint's classes")
    ck_cfg.run.out = cfg.run.out
    x, y = _load_split(ck_cfg, manifest, "test", log)
    probs = training.softmax(training.predict_logits(model, x)).data
    report = evaluation.evaluate(y, probs, manifest.num_classes)
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    evaluation.write_report_csv(report, out / "report.csv", manifest.classes)
    evaluation.write_confusion_csv(report.confusion, out / "confusion.csv", manifest.classes)
    log(f"test accuracy {report.accuracy:.4f} macro F1 {report.macro_f1:.4f} MCC {report.mcc:.4f}")
    return EXIT_OK


def cmd_kfold(cfg, args, inputs, log) -> int:
    manifest = _manifest(cfg)
    log(f"preprocessing {len(manifest.files)} images")
    x = data.load_images(manifest.files, cfg.pipeline, Path(cfg.run.out) / "cache", worker_count())
    res = evaluation.run_kfold(x, manifest.labels, cfg, cfg.run.kfold, Path(cfg.run.out), verbose=not args.quiet)
    log(f"{cfg.run.kfold}-fold mean accuracy {res.mean['accuracy']:.4f} (std {res.std['accuracy']:.4f})")
    return EXIT_OK


def cmd_gradcam(cfg, args, inputs, log) -> int:
    model, ck, ck_cfg = _load_checkpoint(cfg, args)
    layer = args.layer or cfg.run.gradcam_layer
    out = Path(cfg.run.out) / "gradcam"
    out.mkdir(parents=True, exist_ok=True)
    if not inputs:
        ck_cfg.run = cfg.run
        manifest = _manifest(ck_cfg)
        paths, _ = manifest.subset("test")
        inputs = paths[: args.limit]
    for path in inputs:
        if not path.is_file():
            raise data.DataError(f"input image not found: {path}")
        try:
            img = imageproc.load_image(path)
        except ValueError as exc:
            raise data.DataError(str(exc)) from None
        x = imageproc.preprocess_pipeline(img, ck_cfg.pipeline)
        heat, cls = gradcam.grad_cam(model, x, args.target, layer)
        png, _ = gradcam.write_outputs(out / _tag(path), x, heat)
        log(f"{path.name}: class {cls} -> {png}")
    return EXIT_OK


HANDLERS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "kfold": cmd_kfold,
    "gradcam": cmd_gradcam,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_intermixed_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    def log(msg):
        if not args.quiet:
            print(msg, flush=True)

    try:
        cfg, inputs = resolve_config(args)
        if inputs and args.command != "gradcam":
            raise UsageError(f"unexpected arguments {[str(p) for p in inputs]}; overrides look like key=value")
        return HANDLERS[args.command](cfg, args, inputs, log)
    except (UsageError, KeyError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"mhcaf: error: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except data.DataError as exc:
        print(f"mhcaf: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except training.NumericError as exc:
        print(f"mhcaf: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
