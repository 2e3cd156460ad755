"""Versioned binary checkpoint files.

Layout (all integers little-endian)::

    b"KPMC"  u32 version
    repeated: u32 name_len, name (utf-8), u32 rank, u32 extent * rank,
              float64 payload (little-endian, row-major)
    u64 checksum = sum of all payload bytes mod 2**64

Records are written in sorted name order so that equal parameters always
produce identical files.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, TruncatedFileError
from .nn import ParamSet

MAGIC = b"KPMC"
VERSION = 1
BUFFER_SUFFIXES = (".running_mean", ".running_var")


def encode_checkpoint(params: ParamSet) -> bytes:
    arrays = params.all_arrays()
    parts = [MAGIC, struct.pack("<I", VERSION)]
    checksum = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        if not np.isfinite(arr).all():
            raise FormatError(f"parameter {name} is not finite")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload = arr.tobytes()
        checksum = (checksum + int(np.frombuffer(payload, dtype=np.uint8).sum(dtype=np.uint64))) % 2**64
        parts.append(payload)
    parts.append(struct.pack("<Q", checksum))
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> ParamSet:
    if len(blob) < 8:
        raise TruncatedFileError("checkpoint is shorter than its header")
    if blob[:4] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic bytes)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos, end = 8, len(blob) - 8
    if end < pos:
        raise TruncatedFileError("checkpoint is missing its checksum")

    def take(n):
        nonlocal pos
        if pos + n > end:
            raise TruncatedFileError("checkpoint ends inside a record")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    params = ParamSet()
    checksum = 0
    while pos < end:
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape, dtype=np.int64))
        payload = take(8 * count)
        checksum = (checksum + int(np.frombuffer(payload, dtype=np.uint8).sum(dtype=np.uint64))) % 2**64
        arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
        target = params.buffers if name.endswith(BUFFER_SUFFIXES) else params.weights
        target[name] = arr
    (stored,) = struct.unpack_from("<Q", blob, end)
    if stored != checksum:
        raise FormatError("checkpoint checksum mismatch")
    return params


def checkpoint_save(params: ParamSet, path, force: bool = True) -> Path:
    path = Path(path)
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; pass force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(params))
    os.replace(tmp, path)
    return path


def checkpoint_load(path) -> ParamSet:
    return decode_checkpoint(Path(path).read_bytes())
