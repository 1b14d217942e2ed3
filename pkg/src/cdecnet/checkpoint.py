"""Flat binary parameter checkpoints.

Layout, all integers little-endian unsigned 32-bit::

    magic   8 bytes  b"CDCNCKPT"
    version u32      (currently 1)
    count   u32      number of entries
    entry * count:
        name_len u32, name (UTF-8, name_len bytes)
        rank     u32, dims (rank * u32)
        data     prod(dims) little-endian float64, row-major
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"CDCNCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(params: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, arr in params.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    return b"".join(chunks)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:8] != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    pos = 8
    try:
        version, count = struct.unpack_from("<II", buf, pos)
        pos += 8
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            n = int(np.prod(dims, dtype=np.int64))
            if pos + 8 * n > len(buf):
                raise CheckpointError(f"entry {name!r} truncated")
            out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * n
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint at byte {pos}") from exc
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last entry")
    return out


def save(path: str | Path, params: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(params))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
