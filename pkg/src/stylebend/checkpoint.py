"""Binary checkpoint container for named tensors.

Layout (all integers little-endian u32)::

    b"DRAD" | version | entry count |
    per entry: name length | utf-8 name | dtype code (0=f32, 1=f64) |
               rank | extents... | raw row-major element data
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

MAGIC = b"DRAD"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


def encode(entries: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<II", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> Dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} != supported {VERSION}")
    pos = 12
    out: Dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            code, rank = struct.unpack_from("<II", blob, pos)
            pos += 8
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            dtype = _DTYPES[code]
            n = int(np.prod(shape, dtype=np.int64)) if rank else 1
            nbytes = n * dtype.itemsize
            if pos + nbytes > len(blob):
                raise CheckpointError(f"{name}: truncated data")
            out[name] = np.frombuffer(blob, dtype=dtype, count=n, offset=pos).reshape(shape).astype(dtype.newbyteorder("="))
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last entry")
    return out


def save(path: Union[str, Path], entries: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(entries))


def load(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
