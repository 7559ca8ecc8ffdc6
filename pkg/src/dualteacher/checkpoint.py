"""Binary parameter checkpoints ("DTCK").

Layout, all little-endian::

    b"DTCK" | u32 version | u32 count
    per tensor: u32 name_len | name (utf-8) | u32 rank | u64 extents[rank] | f32 values
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .tensor import ParamSet, Tensor

MAGIC = b"DTCK"
VERSION = 1
CONFIG_RECORD = "__config__"


class CheckpointError(ValueError):
    pass


def dumps(params: ParamSet, header: dict[str, int] | None = None) -> bytes:
    """Serialize ``params``; ``header`` ints go first as a rank-1 ``__config__`` record."""
    records = []
    if header is not None:
        records.append((CONFIG_RECORD, np.array(list(header.values()), dtype="<f4")))
    records.extend((name, p.data) for name, p in params.items())
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(records)))
    for name, arr in records:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> tuple[ParamSet, np.ndarray | None]:
    """Inverse of :func:`dumps`. Returns (params, config values or None)."""
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("not a DTCK checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<II", view, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 12
        params = ParamSet()
        config = None
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", view, off)
            off += 4
            name = bytes(view[off:off + nlen]).decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", view, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}Q", view, off)
            off += 8 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if off + 4 * size > len(view):
                raise CheckpointError(f"truncated data for {name!r}")
            arr = np.frombuffer(view, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
            off += 4 * size
            if name == CONFIG_RECORD:
                config = arr
            elif name in params:
                raise CheckpointError(f"duplicate tensor name {name!r}")
            else:
                params[name] = Tensor(arr)
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if off != len(view):
        raise CheckpointError("trailing bytes after last record")
    return params, config


def save(path: Union[str, Path], params: ParamSet, header: dict[str, int] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(params, header))
    return path


def load(path: Union[str, Path]) -> tuple[ParamSet, np.ndarray | None]:
    return loads(Path(path).read_bytes())
