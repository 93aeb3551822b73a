"""GCW1 weight container.

Layout (all integers little-endian)::

    b"GCW1"  version:u32  count:u32
    repeated count times:
        name_len:u32  name:utf-8  dtype:u8 (0=f32, 1=f64)  rank:u8
        extents:u64[rank]  payload (little-endian, row-major)
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

from .errors import FormatError

MAGIC = b"GCW1"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            raise FormatError(f"{name}: unsupported dtype {arr.dtype}")
        tag = _TAGS[arr.dtype]
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", tag, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> Dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("truncated weight container")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise FormatError("not a GCW1 container (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("entry name is not valid UTF-8") from exc
        tag, rank = struct.unpack("<BB", take(2))
        if tag not in _DTYPES:
            raise FormatError(f"{name}: unknown dtype tag {tag}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        dt = _DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(take(nbytes), dtype=dt).reshape(shape)
        out[name] = arr.astype(dt.newbyteorder("="))
    if pos != len(view):
        raise FormatError("trailing bytes after last entry")
    return out


def save(path: Union[str, Path], arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(arrays))


def load(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
