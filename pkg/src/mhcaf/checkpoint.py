"""Binary checkpoint format.

Layout::

    b"MHCAF1" | uint32 LE manifest length | UTF-8 JSON manifest
    | model tensor payloads | optimizer tensor payloads

Payloads are raw little-endian arrays concatenated in manifest order.  The
manifest carries the tensor names, dtypes and shapes, the epoch, the best
validation accuracy and a flat config snapshot.  Serialization is a pure
function of its inputs, so save -> load -> save reproduces the same bytes.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MHCAF1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: "OrderedDict[str, np.ndarray]"
    optimizer: dict | None = None  # {"t", "lr", "state": OrderedDict name -> array}
    epoch: int = 0
    best_val_acc: float = 0.0
    config: dict = field(default_factory=dict)
    classes: list = field(default_factory=list)


def _le(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    return a.astype(a.dtype.newbyteorder("<"), copy=False)


def _entries(tensors) -> list[dict]:
    return [{"name": k, "dtype": _le(v).dtype.str, "shape": list(v.shape)} for k, v in tensors.items()]


def to_bytes(ck: Checkpoint) -> bytes:
    opt = None
    if ck.optimizer is not None:
        opt = {
            "t": int(ck.optimizer["t"]),
            "lr": float(ck.optimizer["lr"]),
            "tensors": _entries(ck.optimizer["state"]),
        }
    manifest = {
        "format": FORMAT_VERSION,
        "epoch": int(ck.epoch),
        "best_val_acc": float(ck.best_val_acc),
        "classes": list(ck.classes),
        "config": ck.config,
        "tensors": _entries(ck.tensors),
        "optimizer": opt,
    }
    head = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(head)), head]
    parts += [_le(v).tobytes() for v in ck.tensors.values()]
    if opt is not None:
        parts += [_le(v).tobytes() for v in ck.optimizer["state"].values()]
    return b"".join(parts)


def _read_tensors(buf: memoryview, offset: int, entries) -> tuple["OrderedDict[str, np.ndarray]", int]:
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for e in entries:
        dt = np.dtype(e["dtype"])
        n = int(np.prod(e["shape"], dtype=np.int64)) * dt.itemsize
        if offset + n > len(buf):
            raise CheckpointError(f"truncated checkpoint while reading {e['name']}")
        arr = np.frombuffer(buf[offset : offset + n], dtype=dt).reshape(e["shape"])
        out[e["name"]] = arr.astype(dt.newbyteorder("="))
        offset += n
    return out, offset


def from_bytes(data: bytes) -> Checkpoint:
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (n,) = struct.unpack_from("<I", data, len(MAGIC))
    start = len(MAGIC) + 4
    manifest = json.loads(data[start : start + n].decode("utf-8"))
    if manifest.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')}")
    buf = memoryview(data)
    tensors, off = _read_tensors(buf, start + n, manifest["tensors"])
    opt = None
    if manifest["optimizer"] is not None:
        state, off = _read_tensors(buf, off, manifest["optimizer"]["tensors"])
        opt = {"t": manifest["optimizer"]["t"], "lr": manifest["optimizer"]["lr"], "state": state}
    if off != len(data):
        raise CheckpointError(f"{len(data) - off} trailing bytes after payloads")
    return Checkpoint(
        tensors, opt, manifest["epoch"], manifest["best_val_acc"], manifest["config"], manifest["classes"]
    )


def save(path: str | Path, ck: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ck))
    tmp.replace(path)


def load(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
