"""Versioned binary checkpoints.

Layout, all integers little-endian uint32 unless noted:

    magic "RLABCKP1" (8 bytes)
    format version
    config byte length, config text (utf-8 key=value lines)
    array count
    per array: name length, name (utf-8), ndim, dims..., float32 data (LE)

Round trips are bit-exact: arrays are written straight from their float32
buffers.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from routelab.config import ModelConfig

MAGIC = b"RLABCKP1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """File is not a readable checkpoint of a supported version."""


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def save_checkpoint(path, cfg: ModelConfig, named_arrays) -> None:
    """Write config plus named float32 arrays. Order is preserved."""
    named_arrays = list(named_arrays)
    cfg_bytes = cfg.to_text().encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_u32(FORMAT_VERSION))
        f.write(_u32(len(cfg_bytes)))
        f.write(cfg_bytes)
        f.write(_u32(len(named_arrays)))
        for name, arr in named_arrays:
            # asarray keeps 0-d scalars 0-d; tobytes() serialises in C order
            data = np.asarray(arr).astype("<f4", copy=False)
            name_b = name.encode("utf-8")
            f.write(_u32(len(name_b)))
            f.write(name_b)
            f.write(_u32(data.ndim))
            for dim in data.shape:
                f.write(_u32(dim))
            f.write(data.tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, dict]:
    """Read (config, {name: float32 array}) back from ``path``."""
    raw = Path(path).read_bytes()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {off}")
        chunk = raw[off:off + n]
        off += n
        return chunk

    def take_u32() -> int:
        return struct.unpack("<I", take(4))[0]

    if take(len(MAGIC)) != MAGIC:
        raise CheckpointError("bad magic: not a routelab checkpoint")
    version = take_u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg = ModelConfig.from_text(take(take_u32()).decode("utf-8"))
    arrays = {}
    for _ in range(take_u32()):
        name = take(take_u32()).decode("utf-8")
        ndim = take_u32()
        shape = tuple(take_u32() for _ in range(ndim))
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).copy()
        arrays[name] = data
    if off != len(raw):
        raise CheckpointError(f"{len(raw) - off} trailing bytes after checkpoint payload")
    return cfg, arrays


def load_model(path):
    """Rebuild a model from a checkpoint file."""
    from routelab.model import RoutedLM

    cfg, arrays = load_checkpoint(path)
    model = RoutedLM(cfg)
    model.load_state(arrays)
    return model
