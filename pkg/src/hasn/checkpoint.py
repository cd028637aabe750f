"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"HSNC" | u32 version | u32 len + utf-8 JSON model config | u64 iteration
    | u32 count + tensor records | u8 has_optimizer
    [ | u64 adam step | u32 count + tensor records ("m.<name>", "v.<name>") ]

A tensor record is ``u32 len + utf-8 name | u8 ndim | u32 dims... | float32 LE data``.
"""
from __future__ import annotations

import io
import json
import math
import os
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, param_shapes
from .optim import AdamState

MAGIC = b"HSNC"
FORMAT_VERSION = 1
_F32 = np.dtype("<f4")


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


def _write_tensor(buf, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype=_F32).tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"checkpoint truncated: needed {n} bytes at offset {self.pos}, file has {len(self.data)}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensor(self):
        (n,) = self.unpack("<I")
        name = self.take(n).decode("utf-8")
        (ndim,) = self.unpack("<B")
        shape = self.unpack(f"<{ndim}I") if ndim else ()
        count = math.prod(shape)
        arr = np.frombuffer(self.take(4 * count), dtype=_F32).astype(np.float32).reshape(shape)
        return name, arr


def save_checkpoint(path, cfg: ModelConfig, params: dict, optimizer: AdamState | None = None, iteration: int = 0) -> None:
    """Write atomically (temp file + rename) so a crash never leaves a partial file."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    cfg_raw = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg_raw)))
    buf.write(cfg_raw)
    buf.write(struct.pack("<Q", iteration))
    buf.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        _write_tensor(buf, name, np.asarray(arr))
    buf.write(struct.pack("<B", 1 if optimizer is not None else 0))
    if optimizer is not None:
        buf.write(struct.pack("<Q", optimizer.step))
        buf.write(struct.pack("<I", 2 * len(optimizer.m)))
        for name in optimizer.m:
            _write_tensor(buf, f"m.{name}", optimizer.m[name])
            _write_tensor(buf, f"v.{name}", optimizer.v[name])
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path):
    """Return ``(cfg, params, optimizer_or_None, iteration)``; validates every shape."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    r = _Reader(path.read_bytes())
    magic = r.take(4)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported format version {version}")
    (n,) = r.unpack("<I")
    try:
        cfg = ModelConfig.from_dict(json.loads(r.take(n).decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: invalid model config: {exc}") from exc
    (iteration,) = r.unpack("<Q")
    expected = param_shapes(cfg)
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        name, arr = r.tensor()
        if name not in expected:
            raise ShapeMismatchError(f"{path}: unexpected tensor {name} for this config")
        if arr.shape != expected[name]:
            raise ShapeMismatchError(f"{path}: tensor {name} has shape {arr.shape}, config expects {expected[name]}")
        params[name] = arr
    missing = [k for k in expected if k not in params]
    if missing:
        raise ShapeMismatchError(f"{path}: missing tensors {', '.join(missing)}")
    (has_opt,) = r.unpack("<B")
    optimizer = None
    if has_opt:
        (step,) = r.unpack("<Q")
        (count,) = r.unpack("<I")
        optimizer = AdamState(step=step)
        for _ in range(count):
            name, arr = r.tensor()
            kind, _, pname = name.partition(".")
            if kind not in ("m", "v") or pname not in expected:
                raise ShapeMismatchError(f"{path}: unexpected optimizer tensor {name}")
            if arr.shape != expected[pname]:
                raise ShapeMismatchError(f"{path}: optimizer tensor {name} has shape {arr.shape}, expected {expected[pname]}")
            getattr(optimizer, kind)[pname] = arr
        if set(optimizer.m) != set(expected) or set(optimizer.v) != set(expected):
            raise ShapeMismatchError(f"{path}: optimizer state does not cover every parameter")
        optimizer.m = {k: optimizer.m[k] for k in expected}
        optimizer.v = {k: optimizer.v[k] for k in expected}
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: {len(r.data) - r.pos} trailing bytes after checkpoint payload")
    return cfg, {k: params[k] for k in expected}, optimizer, iteration
