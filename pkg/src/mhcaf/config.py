"""Run configuration: dataclasses plus the flat ``section.key = value`` file format.

A config file holds one assignment per line; ``#`` starts a comment.  Keys
are ``<section>.<field>`` with sections ``model``, ``fusion``, ``pipeline``,
``train`` and ``run``.  Lists are comma separated.  Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


@dataclass
class FusionConfig:
    token_mode: str = "single"  # or "reshaped"
    heads: int = 4
    tokens: int = 8  # sequence length in reshaped mode


@dataclass
class ModelConfig:
    image_size: int = 128
    num_classes: int = 78
    stem_conv_kernel: int = 4
    stem_conv_stride: int = 4
    stem_widths: tuple = (32, 64, 128, 256)
    stem_strides: tuple = (1, 2, 2, 2)
    expansion: int = 2
    stem_padding: str = "edge"  # depthwise border mode in the stem: "edge" or "zero"
    cbam_reduction: int = 16
    cbam_kernel: int = 7
    patch: int = 16
    embed_dim: int = 64
    heads: int = 4
    vit_depth: int = 4
    vit_ff: int = 512
    conf_depth: int = 4
    conf_ff: int = 256
    conf_kernel: int = 3
    feat_dim: int = 512
    head_widths: tuple = (512, 256, 128)
    cnn_dropout: float = 0.3
    vit_dropout: float = 0.2
    conf_dropout: float = 0.2
    head_dropout: float = 0.3
    bn_momentum: float = 0.1
    freeze: tuple = ()
    dtype: str = "float64"


@dataclass
class PipelineConfig:
    blur: bool = True
    sigma: float = 1.0
    radius: int = 2
    deskew: bool = True
    dilate: bool = True
    dilate_kernel: int = 3
    resize: bool = True
    size: int = 128


@dataclass
class TrainConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    plateau_factor: float = 0.5
    plateau_patience: int = 7
    early_stop_patience: int = 15
    max_epochs: int = 40
    batch_size: int = 32
    seed: int = 0
    class_weighting: bool = True
    improve_tol: float = 1e-6
    val_fraction: float = 0.1
    test_fraction: float = 0.1

    def validate(self) -> None:
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be positive")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch normalization)")
        if self.max_epochs < 1 or self.lr <= 0:
            raise ValueError("max_epochs and lr must be positive")


@dataclass
class RunSection:
    data: str = ""
    out: str = "runs"
    synthetic: str = ""
    split_seed: int = 0
    kfold: int = 5
    gradcam_layer: str = "cnn.stem.top"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    run: RunSection = field(default_factory=RunSection)

    def set(self, key: str, value: str) -> None:
        section, _, name = key.strip().partition(".")
        sec = getattr(self, section, None) if section in _SECTIONS else None
        if sec is None or not name or name not in {f.name for f in dataclasses.fields(sec)}:
            raise KeyError(f"unknown config key {key!r}")
        current = getattr(sec, name)
        setattr(sec, name, _coerce(value, current, key))

    def to_flat(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for sec in _SECTIONS:
            for f in dataclasses.fields(getattr(self, sec)):
                v = getattr(getattr(self, sec), f.name)
                out[f"{sec}.{f.name}"] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_flat(cls, flat: dict[str, Any]) -> "RunConfig":
        cfg = cls()
        for k, v in flat.items():
            cfg.set(k, v if isinstance(v, str) else _render(v))
        return cfg

    def validate(self) -> None:
        self.train.validate()
        if self.fusion.token_mode not in ("single", "reshaped"):
            raise ValueError(f"fusion.token_mode must be single or reshaped, got {self.fusion.token_mode!r}")
        if self.model.stem_padding not in ("edge", "zero"):
            raise ValueError(f"model.stem_padding must be edge or zero, got {self.model.stem_padding!r}")
        if self.model.dtype not in ("float32", "float64"):
            raise ValueError("model.dtype must be float32 or float64")


_SECTIONS = ("model", "fusion", "pipeline", "train", "run")


def _render(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def _coerce(text: str, current, key: str):
    text = text.strip()
    try:
        if isinstance(current, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            if current and isinstance(current[0], int):
                return tuple(int(t) for t in items)
            if key.endswith("freeze"):
                return tuple(items)
            try:
                return tuple(int(t) for t in items)
            except ValueError:
                return tuple(items)
        return text
    except ValueError:
        raise ValueError(f"bad value {text!r} for {key}") from None


def parse_config_text(text: str, cfg: RunConfig | None = None) -> RunConfig:
    cfg = cfg or RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
        k, v = line.split("=", 1)
        cfg.set(k.strip(), v.strip())
    return cfg


def load_config(path: str | Path, cfg: RunConfig | None = None) -> RunConfig:
    return parse_config_text(Path(path).read_text(), cfg)


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {_render(v)}\n" for k, v in cfg.to_flat().items())
