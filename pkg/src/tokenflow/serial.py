"""Binary tensor blobs: little-endian, self-describing, float32 or float64.

Layout: magic ``TNSR``, u32 version, u32 rank, u64 dims[rank], u32 dtype flag
(0 = float32, 1 = float64), then the row-major payload.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"TNSR"
VERSION = 1
_FLAGS = {0: "<f4", 1: "<f8"}
_FLAG_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _FLAG_OF:
        arr = arr.astype(np.float64)
    flag = _FLAG_OF[arr.dtype]
    head = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    head += struct.pack("<I", flag)
    return head + arr.astype(_FLAGS[flag]).tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one blob starting at ``offset``; returns (array, next offset)."""
    if len(buf) < offset + 12:
        raise ValueError("truncated tensor blob: header incomplete")
    if buf[offset:offset + 4] != MAGIC:
        raise ValueError(f"bad tensor magic {buf[offset:offset + 4]!r}")
    version, rank = struct.unpack_from("<II", buf, offset + 4)
    if version != VERSION:
        raise ValueError(f"unsupported tensor version {version}")
    pos = offset + 12
    if len(buf) < pos + 8 * rank + 4:
        raise ValueError("truncated tensor blob: dims incomplete")
    dims = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    (flag,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if flag not in _FLAGS:
        raise ValueError(f"unknown tensor dtype flag {flag}")
    dtype = np.dtype(_FLAGS[flag])
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    nbytes = count * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise ValueError("truncated tensor blob: payload incomplete")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(dims)
    return arr.copy(), pos + nbytes


def write_tensor(fh, arr: np.ndarray) -> int:
    """Append one blob to a binary file handle; returns bytes written."""
    blob = tensor_to_bytes(arr)
    fh.write(blob)
    return len(blob)


def read_tensor(fh) -> np.ndarray:
    """Read one blob from the current position of a binary file handle."""
    head = fh.read(12)
    if len(head) < 12:
        raise ValueError("truncated tensor blob: header incomplete")
    if head[:4] != MAGIC:
        raise ValueError(f"bad tensor magic {head[:4]!r}")
    version, rank = struct.unpack("<II", head[4:])
    if version != VERSION:
        raise ValueError(f"unsupported tensor version {version}")
    body = fh.read(8 * rank + 4)
    if len(body) < 8 * rank + 4:
        raise ValueError("truncated tensor blob: dims incomplete")
    dims = struct.unpack(f"<{rank}Q", body[:8 * rank])
    (flag,) = struct.unpack("<I", body[8 * rank:])
    if flag not in _FLAGS:
        raise ValueError(f"unknown tensor dtype flag {flag}")
    dtype = np.dtype(_FLAGS[flag])
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = fh.read(count * dtype.itemsize)
    if len(payload) < count * dtype.itemsize:
        raise ValueError("truncated tensor blob: payload incomplete")
    return np.frombuffer(payload, dtype=dtype, count=count).reshape(dims).copy()
