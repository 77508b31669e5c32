"""Versioned binary checkpoints.

Layout (little-endian): ``b"HYPF"``, u32 format version, u32 config length,
config JSON (UTF-8), u32 tensor count, then per tensor: u32 name length,
name (UTF-8), u32 ndim, ndim x u32 dims, float64 values in row-major order.
Parameters and running-statistic buffers are both stored.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import ConfigError, Hypformer, HypformerConfig

MAGIC = b"HYPF"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _state(model: Hypformer) -> list[tuple[str, np.ndarray]]:
    items = [(name, p.data) for name, p in model.named_parameters()]
    items += list(model.named_buffers())
    return items


def save_checkpoint(model: Hypformer, path) -> None:
    config = model.config.to_json().encode("utf-8")
    items = _state(model)
    parts = [MAGIC, struct.pack("<II", VERSION, len(config)), config, struct.pack("<I", len(items))]
    for name, arr in items:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8", order="C")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, blob: bytes) -> None:
        self.blob, self.pos = blob, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals


def load_checkpoint(path) -> Hypformer:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        config = HypformerConfig.from_json(r.take(r.u32()).decode("utf-8"))
    except (ConfigError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"embedded config is invalid: {exc}") from None
    stored = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = tuple(np.atleast_1d(r.u32(ndim))) if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        stored[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(blob):
        raise CheckpointError(f"{len(blob) - r.pos} trailing bytes in checkpoint")
    model = Hypformer(config)
    expected = dict(_state(model))
    if set(expected) != set(stored):
        missing = sorted(set(expected) - set(stored))
        extra = sorted(set(stored) - set(expected))
        raise CheckpointError(f"tensor names differ from the model: missing {missing}, unexpected {extra}")
    for name, p in model.named_parameters():
        if stored[name].shape != p.data.shape:
            raise CheckpointError(f"{name}: stored shape {stored[name].shape}, model expects {p.data.shape}")
        p.data = stored[name].astype(p.data.dtype)
    for name, b in model.named_buffers():
        b[...] = stored[name]
    return model
