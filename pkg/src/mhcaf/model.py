"""The full network: three parallel branches, cross-attention fusion, dense head."""

from __future__ import annotations

import numpy as np

from .cnn import CNNBranch
from .config import FusionConfig, ModelConfig
from .conformer import ConformerBranch
from .fusion import Fusion
from .nn import BatchNorm, Dropout, Linear, Module
from .tensor import Tensor, as_tensor, relu, set_default_dtype
from .vit import ViTBranch


class ClassificationHead(Module):
    """Affine layers of widths ``widths + [C]`` with ReLU -> BatchNorm -> Dropout between them."""

    def __init__(self, n_in: int, widths, n_classes: int, rng: np.random.Generator, p: float, momentum: float):
        super().__init__()
        dims = [n_in, *widths, n_classes]
        self.n_layers = len(dims) - 1
        for i in range(self.n_layers):
            setattr(self, f"fc{i + 1}", Linear(dims[i], dims[i + 1], rng))
            if i < self.n_layers - 1:
                setattr(self, f"bn{i + 1}", BatchNorm(dims[i + 1], momentum))
                setattr(self, f"drop{i + 1}", Dropout(p))

    def forward(self, f):
        h = f
        for i in range(1, self.n_layers):
            h = getattr(self, f"fc{i}")(h)
            h = getattr(self, f"drop{i}")(getattr(self, f"bn{i}")(relu(h)))
        return getattr(self, f"fc{self.n_layers}")(h)


def head_forward(f, head: ClassificationHead, training: bool = False) -> Tensor:
    head.train(training)
    return head(f)


class MHCAFNet(Module):
    def __init__(self, cfg: ModelConfig | None = None, fusion_cfg: FusionConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = cfg or ModelConfig()
        fusion_cfg = fusion_cfg or FusionConfig()
        set_default_dtype(cfg.dtype)
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.cnn = CNNBranch(cfg, rng)
        self.vit = ViTBranch(cfg, rng)
        self.conf = ConformerBranch(cfg, rng)
        self.fusion = Fusion(cfg.feat_dim, fusion_cfg, rng, cfg.bn_momentum)
        self.head = ClassificationHead(
            cfg.feat_dim, cfg.head_widths, cfg.num_classes, rng, cfg.head_dropout, cfg.bn_momentum
        )
        if cfg.freeze:
            self.freeze([f if f.startswith("cnn.") else f"cnn.stem.{f}" for f in cfg.freeze])
        self.reseed_dropout(seed)

    def reseed_dropout(self, seed: int) -> None:
        """All dropout layers share one generator seeded from ``seed``."""
        gen = np.random.default_rng([seed, 0x5EED])
        for m in self.modules():
            if isinstance(m, Dropout):
                m.rng = gen

    def branch_features(self, x, capture: dict | None = None):
        """Run the three branches on the same input batch.

        Branches are independent sub-graphs; they are evaluated one after
        another because graph recording is single-context.
        """
        x = as_tensor(x)
        return self.cnn(x, capture), self.vit(x), self.conf(x)

    def forward(self, x, capture: dict | None = None) -> Tensor:
        f_eff, f_vit, f_conf = self.branch_features(x, capture)
        if capture is not None:
            capture.update({"f_eff": f_eff, "f_vit": f_vit, "f_conf": f_conf})
        fused = self.fusion(f_eff, f_vit, f_conf, capture)
        if capture is not None:
            capture["fusion"] = fused
        return self.head(fused)

    def layer_names(self) -> list[str]:
        return self.cnn.layer_names()

    def layer_geometry(self) -> dict[str, tuple[float, float]]:
        return self.cnn.layer_geometry()

