"""Binary checkpoint format.

Layout (little-endian)::

    b"AR3D"  u32 version
    u32 len, UTF-8 JSON config      (model config plus free-form run metadata)
    u32 len, UTF-8 JSON vocabulary layout
    u32 tensor count
    per tensor: u32 len, UTF-8 name, u32 rank, u64 extents..., float64 values
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .model import ModelConfig, ModelParams, param_shapes
from .tokenizer import VocabLayout

MAGIC = b"AR3D"
VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class LayoutMismatchError(CheckpointError):
    pass


def _block(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def to_bytes(params: ModelParams, layout: VocabLayout, meta: dict | None = None) -> bytes:
    check_layout(params.config, layout)
    config = {"model": params.config.to_dict(), "meta": meta or {}}
    parts = [MAGIC, struct.pack("<I", VERSION), _block(json.dumps(config, sort_keys=True)), _block(layout.to_json())]
    parts.append(struct.pack("<I", len(params)))
    for name in sorted(params):
        v = np.ascontiguousarray(params[name].value, dtype="<f8")
        parts.append(_block(name))
        parts.append(struct.pack(f"<I{v.ndim}Q", v.ndim, *v.shape))
        parts.append(v.tobytes())
    return b"".join(parts)


def save_checkpoint(path, params: ModelParams, layout: VocabLayout, meta: dict | None = None) -> None:
    """Write atomically: a crash never leaves a half-written checkpoint at ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(params, layout, meta))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"checkpoint truncated while reading {what}: need {n} bytes at offset {self.pos}, "
                f"file has {len(self.data)}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def text(self, what: str) -> str:
        n = self.u32(what + " length")
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"{what} is not valid UTF-8: {e}") from None


def check_layout(config: ModelConfig, layout: VocabLayout) -> None:
    if config.decoder.vocab_size != layout.vocab_size:
        raise LayoutMismatchError(
            f"vocabulary layout has {layout.vocab_size} tokens but the model's output projection has "
            f"{config.decoder.vocab_size}"
        )


def from_bytes(data: bytes) -> tuple[ModelParams, VocabLayout, dict]:
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"not a checkpoint: magic {magic!r}, expected {MAGIC!r}")
    version = r.u32("version")
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint format version {version}; this build reads version {VERSION}")
    try:
        config = json.loads(r.text("config block"))
        layout = VocabLayout.from_json(r.text("layout block"))
        model_cfg = ModelConfig.from_dict(config["model"])
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise CheckpointError(f"malformed config or layout block: {e}") from None
    check_layout(model_cfg, layout)
    shapes = param_shapes(model_cfg)
    count = r.u32("tensor count")
    if count != len(shapes):
        raise ShapeMismatchError(f"checkpoint holds {count} tensors, model config expects {len(shapes)}")
    dtype = np.dtype(model_cfg.dtype)
    params = ModelParams(model_cfg)
    for _ in range(count):
        name = r.text("tensor name")
        rank = r.u32(f"rank of {name}")
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank, f"extents of {name}"))
        if name not in shapes:
            raise ShapeMismatchError(f"unexpected tensor {name!r}")
        if tuple(dims) != shapes[name]:
            raise ShapeMismatchError(f"tensor {name!r} has shape {tuple(dims)}, model expects {shapes[name]}")
        n = int(np.prod(dims, dtype=np.int64))
        vals = np.frombuffer(r.take(8 * n, f"values of {name}"), dtype="<f8").reshape(dims)
        params[name] = Tensor(vals.astype(dtype), requires_grad=True, name=name)
    missing = set(shapes) - set(params)
    if missing:
        raise ShapeMismatchError(f"checkpoint lacks tensors {sorted(missing)}")
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after the last tensor")
    return params, layout, config.get("meta", {})


def load_checkpoint(path) -> tuple[ModelParams, VocabLayout, dict]:
    """Return (params, layout, run metadata)."""
    return from_bytes(Path(path).read_bytes())
