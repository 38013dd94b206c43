"""Parameter containers and the small set of reusable layers."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor, get_default_dtype


class Parameter(Tensor):
    """A leaf tensor owned by a module; ``trainable`` gates optimizer updates."""

    __slots__ = ("trainable",)

    def __init__(self, data, trainable: bool = True):
        super().__init__(np.asarray(data, dtype=get_default_dtype()), requires_grad=trainable)
        self.trainable = trainable

    def freeze(self) -> None:
        self.trainable = False
        self.requires_grad = False
        self.grad = None


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled outside two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return trunc_normal(rng, shape, std=float(np.sqrt(2.0 / fan_in)))


class Module:
    """Base class: parameters, buffers and submodules are discovered from
    instance attributes in assignment order, which fixes checkpoint order."""

    def __init__(self):
        self.training = True
        self._buffers: OrderedDict[str, np.ndarray] = OrderedDict()

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for k, v in vars(self).items():
            if isinstance(v, Module):
                yield k, v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for k, v in vars(self).items():
            if isinstance(v, Parameter):
                yield prefix + k, v
            elif isinstance(v, Module):
                yield from v.named_parameters(prefix + k + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k, v in vars(self).items():
            if isinstance(v, Module):
                yield from v.named_buffers(prefix + k + ".")
        for k, v in self._buffers.items():
            yield prefix + k, v

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, m in self.children():
            yield from m.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        sd: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, p in self.named_parameters():
            sd[name] = p.data.copy()
        for name, b in self.named_buffers():
            sd[name] = b.copy()
        return sd

    def load_state_dict(self, sd) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        expected = list(own) + list(bufs)
        missing = [k for k in expected if k not in sd]
        extra = [k for k in sd if k not in own and k not in bufs]
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name in expected:
            src = np.asarray(sd[name])
            dst = own[name].data if name in own else bufs[name]
            if src.shape != dst.shape:
                raise ValueError(f"shape mismatch for {name}: checkpoint {src.shape} vs model {dst.shape}")
        for name, p in own.items():
            p.data = np.array(sd[name], dtype=p.data.dtype)
            if p.requires_grad:
                p.grad = np.zeros_like(p.data)
        for name, b in bufs.items():
            b[...] = sd[name]

    def freeze(self, prefixes) -> list[str]:
        """Freeze every parameter whose dotted name starts with one of ``prefixes``."""
        hit = []
        for name, p in self.named_parameters():
            if any(name == pre or name.startswith(pre + ".") for pre in prefixes):
                p.freeze()
                hit.append(name)
        return hit

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, std: float = 0.02, bias: bool = True):
        super().__init__()
        self.w = Parameter(trunc_normal(rng, (n_in, n_out), std))
        self.b = Parameter(np.zeros(n_out)) if bias else None

    def forward(self, x):
        return ops.linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))
        self.eps = eps

    def forward(self, x):
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)


class BatchNorm(Module):
    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(c))
        self.beta = Parameter(np.zeros(c))
        self.momentum = momentum
        self.eps = eps
        self.register_buffer("running_mean", np.zeros(c, dtype=get_default_dtype()))
        self.register_buffer("running_var", np.ones(c, dtype=get_default_dtype()))

    def forward(self, x):
        return ops.batch_norm(
            x,
            self.gamma,
            self.beta,
            self._buffers["running_mean"],
            self._buffers["running_var"],
            self.training,
            self.momentum,
            self.eps,
        )


class Dropout(Module):
    def __init__(self, p: float):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
        self.p = p
        self.rng: np.random.Generator | None = None

    def forward(self, x):
        return ops.dropout(x, self.p, self.rng, self.training)
