"""Tensor container used for every on-disk array (frames, keyframes, corpora).

Layout: magic "FWTN", u32 version, u32 rank, u32 dims[rank], float32
little-endian payload, trailing CRC32 of everything before it.
"""

from __future__ import annotations

import os
import struct
import zlib

import numpy as np

MAGIC = b"FWTN"
VERSION = 1


class TensorFormatError(ValueError):
    pass


def tensor_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    body = header + arr.tobytes()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def write_tensor(path: str, arr: np.ndarray) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(tensor_bytes(arr))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise TensorFormatError("bad magic")
    version, rank = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    offset = 12
    if len(blob) < offset + 4 * rank + 4:
        raise TensorFormatError("truncated header")
    dims = struct.unpack_from(f"<{rank}I", blob, offset)
    offset += 4 * rank
    count = int(np.prod(dims)) if rank else 1
    end = offset + 4 * count
    if len(blob) != end + 4:
        raise TensorFormatError("payload size mismatch")
    (crc,) = struct.unpack_from("<I", blob, end)
    if crc != (zlib.crc32(blob[:end]) & 0xFFFFFFFF):
        raise TensorFormatError("CRC mismatch")
    data = np.frombuffer(blob[offset:end], dtype="<f4")
    return data.reshape(dims).copy()


def read_tensor(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
