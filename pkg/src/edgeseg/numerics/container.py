"""Flat binary container for named tensors (checkpoints).

Layout, all integers little-endian::

    magic       8 bytes   b"EDGSTNSR"
    count       u32       number of entries
    per entry:
      name_len  u32
      name      name_len bytes, UTF-8
      width     u32       bytes per scalar: 4 (float32) or 8 (float64)
      rank      u32
      extents   rank x u32
      data      prod(extents) scalars, little-endian IEEE-754, row-major

Entries are written in the order given, so identical inputs give identical bytes.
"""

from __future__ import annotations

import os
import struct
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"EDGSTNSR"
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class ContainerError(IOError):
    pass


def write_tensor(f: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    width = arr.dtype.itemsize if arr.dtype.kind == "f" else 0
    if width not in _DTYPES:
        raise ContainerError(f"cannot store dtype {arr.dtype}")
    f.write(struct.pack("<II", width, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype=_DTYPES[width]).tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    width, rank = _unpack(f, "<II")
    extents = _unpack(f, f"<{rank}I") if rank else ()
    dtype = _DTYPES.get(width)
    if dtype is None:
        raise ContainerError(f"unsupported scalar width {width}")
    count = int(np.prod(extents)) if rank else 1
    raw = f.read(count * width)
    if len(raw) != count * width:
        raise ContainerError("truncated tensor payload")
    return np.frombuffer(raw, dtype=dtype).reshape(extents).astype(dtype.newbyteorder("="))


def save_tensors(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            write_tensor(f, arr)
    os.replace(tmp, path)


def load_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    try:
        f = open(path, "rb")
    except OSError as exc:
        raise ContainerError(f"{path}: {exc.strerror}") from exc
    with f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ContainerError(f"{path}: not a tensor container (bad magic)")
        (count,) = _unpack(f, "<I")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = _unpack(f, "<I")
            name = f.read(n).decode("utf-8")
            out[name] = read_tensor(f)
        return out


def _unpack(f: BinaryIO, fmt: str) -> tuple:
    size = struct.calcsize(fmt)
    raw = f.read(size)
    if len(raw) != size:
        raise ContainerError("unexpected end of container")
    return struct.unpack(fmt, raw)
