"""DLCK checkpoint files.

Layout, little-endian throughout::

    b"DLCK"  u32 version=1  u32 entry_count
    per entry:  u16 name_len, name (UTF-8), u8 rank, u64 dims[rank],
                u8 dtype (0=f64, 1=f32), raw values (row-major)

Entry names are ``"<block>.<role>"``, e.g. ``"0.weight"``, ``"4.running_var"``.
Entries are written in model order, so saving the same parameters always
produces the same bytes.
"""
from __future__ import annotations

import os
import struct

import numpy as np

from .model import Model, build, init_block

MAGIC = b"DLCK"
VERSION = 1
DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
DTYPE_TAGS = {"f64": 0, "f32": 1}


class CheckpointError(ValueError):
    pass


def model_tensors(model: Model) -> dict[str, np.ndarray]:
    out = {}
    for i, block in enumerate(model.blocks):
        for layer in block.layers:
            for role, p in layer.params.items():
                out[f"{i}.{'prelu_a' if role == 'a' else role}"] = p
            for role, b in layer.buffers.items():
                out[f"{i}.{role}"] = b
    return out


def encode(tensors: dict[str, np.ndarray], dtype: str = "f64") -> bytes:
    tag = DTYPE_TAGS[dtype]
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw_name = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(struct.pack("<B", tag))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPES[tag]).tobytes())
    return b"".join(parts)


def decode(raw: bytes) -> tuple[dict[str, np.ndarray], str]:
    if raw[:4] != MAGIC:
        raise CheckpointError(f"not a DLCK checkpoint (magic {raw[:4]!r})")
    try:
        version, count = struct.unpack_from("<II", raw, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        tensors = {}
        dtype = "f64"
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}Q", raw, pos)
            pos += 8 * rank
            (tag,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            if tag not in DTYPES:
                raise CheckpointError(f"unknown dtype tag {tag} for {name!r}")
            dtype = "f32" if tag == 1 else "f64"
            n = int(np.prod(dims)) if rank else 1
            nbytes = n * DTYPES[tag].itemsize
            if pos + nbytes > len(raw):
                raise CheckpointError(f"truncated data for {name!r}")
            tensors[name] = np.frombuffer(raw, DTYPES[tag], n, pos).reshape(dims).astype(np.float64)
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes after last entry")
    return tensors, dtype


def save_checkpoint(model: Model, path, dtype: str = "f64"):
    data = encode(model_tensors(model), dtype)
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def read_checkpoint(path):
    with open(path, "rb") as f:
        return decode(f.read())


def load_checkpoint(path, model_or_spec, replace=(), seed: int | None = None) -> Model:
    """Load parameters into a model built from ``model_or_spec``.

    Blocks listed in ``replace`` keep fresh (seeded) initial values instead
    of the stored ones; every other block must match the file exactly.
    """
    tensors, _ = read_checkpoint(path)
    model = model_or_spec if isinstance(model_or_spec, Model) else build(model_or_spec, seed)
    replace = {int(r) % len(model.blocks) if model.blocks else int(r) for r in replace}
    expected = model_tensors(model)
    used = set()
    for name, target in expected.items():
        block = int(name.split(".", 1)[0])
        if block in replace:
            continue
        if name not in tensors:
            raise CheckpointError(f"checkpoint has no entry {name!r}")
        value = tensors[name]
        if value.shape != target.shape:
            raise CheckpointError(f"shape mismatch for {name!r}: file {value.shape}, model {target.shape}")
        used.add(name)
    extra = [n for n in tensors if n not in used and int(n.split(".", 1)[0]) not in replace]
    if extra:
        raise CheckpointError(f"checkpoint entries not in model: {extra}")
    for i, block in enumerate(model.blocks):
        if i in replace:
            continue
        for layer in block.layers:
            for role in layer.params:
                layer.params[role] = tensors[f"{i}.{'prelu_a' if role == 'a' else role}"].copy()
            for role in layer.buffers:
                layer.buffers[role] = tensors[f"{i}.{role}"].copy()
            layer.zero_grads()
    return model
