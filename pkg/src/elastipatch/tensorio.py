"""Binary named-tensor container used by checkpoints and dataset caches.

Each tensor is stored as: u32 name length, name bytes, u32 ndim,
ndim x u64 dims, then the payload as little-endian float64.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ParseError


def write_tensors(f, tensors: dict[str, np.ndarray]) -> None:
    f.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        payload = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode()
        f.write(struct.pack("<I", len(nb)))
        f.write(nb)
        f.write(struct.pack("<I", payload.ndim))
        if payload.ndim:
            f.write(struct.pack(f"<{payload.ndim}Q", *payload.shape))
        f.write(payload.tobytes())


def read_tensors(data: bytes, pos: int) -> dict[str, np.ndarray]:
    if pos + 4 > len(data):
        raise ParseError("truncated tensor count", offset=pos)
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        if pos + 4 > len(data):
            raise ParseError("truncated tensor entry", offset=pos)
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, pos) if ndim else ()
        pos += 8 * ndim
        nbytes = 8 * int(np.prod(shape, dtype=np.int64)) if ndim else 8
        if pos + nbytes > len(data):
            raise ParseError(f"truncated payload for tensor {name!r}", offset=pos)
        arr = np.frombuffer(data[pos : pos + nbytes], dtype="<f8")
        tensors[name] = arr.reshape(shape).copy() if ndim else arr.copy().reshape(())
        pos += nbytes
    return tensors
