"""
Parameter trees and the binary checkpoint format.

A parameter tree is any nesting of dataclasses and lists whose leaves are
``Tensor`` objects. Names are dotted paths (``decoder.0.ffn.w1``).

Checkpoint layout, little-endian throughout::

    b"UDIT"
    u32 version
    u32 n_config, then n_config x u32 config ints
    u32 n_tensors
    per tensor: u32 name_len, name (utf-8), u32 rank, rank x u32 dims, float64 payload
"""

from __future__ import annotations

import dataclasses
import struct
from typing import Iterator

import numpy as np

from .numcore import Tensor

MAGIC = b"UDIT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def named_tensors(tree, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    if isinstance(tree, Tensor):
        yield prefix, tree
    elif dataclasses.is_dataclass(tree):
        for f in dataclasses.fields(tree):
            yield from named_tensors(getattr(tree, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(tree, (list, tuple)):
        for i, item in enumerate(tree):
            yield from named_tensors(item, f"{prefix}.{i}" if prefix else str(i))
    elif isinstance(tree, dict):
        for key, item in tree.items():
            yield from named_tensors(item, f"{prefix}.{key}" if prefix else str(key))


def parameters(tree) -> list[Tensor]:
    """Distinct tensors of a tree, first occurrence order."""
    seen, out = set(), []
    for _, t in named_tensors(tree):
        if id(t) not in seen:
            seen.add(id(t))
            out.append(t)
    return out


def save_checkpoint(path, config: list[int], tensors: dict[str, Tensor]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(config))]
    chunks.append(struct.pack(f"<{len(config)}I", *config))
    chunks.append(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> tuple[list[int], dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, n_config = take("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    config = list(take(f"<{n_config}I"))
    (n_tensors,) = take("<I")
    tensors = {}
    for _ in range(n_tensors):
        (name_len,) = take("<I")
        name = buf[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = take("<I")
        dims = take(f"<{rank}I")
        count = int(np.prod(dims)) if rank else 1
        if pos + 8 * count > len(buf):
            raise CheckpointError(f"{path}: truncated payload for {name}")
        tensors[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * count
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return config, tensors


def assign(tree, values: dict[str, np.ndarray], prefix: str = "") -> None:
    """Copy arrays into the matching tensors of ``tree`` (names must match exactly)."""
    named = dict(named_tensors(tree))
    wanted = {k[len(prefix):]: v for k, v in values.items() if k.startswith(prefix)}
    missing = set(named) - set(wanted)
    extra = set(wanted) - set(named)
    if missing or extra:
        raise CheckpointError(f"checkpoint mismatch: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
    for name, t in named.items():
        arr = wanted[name]
        if arr.shape != t.shape:
            raise CheckpointError(f"{name}: shape {arr.shape} != {t.shape}")
        t.data[...] = arr
