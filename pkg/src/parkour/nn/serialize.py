"""Versioned binary checkpoint container.

Layout: magic, version, JSON metadata block, then a named-array table
(name, dtype code, shape, raw little-endian values). Loading into an
existing parameter set rejects any shape mismatch. Writes are atomic
(temp file + rename).
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

_MAGIC = b"PKCK"
_VERSION = 1
_DTYPES = {"<f8": 0, "<f4": 1, "<i8": 2}
_DTYPES_REV = {v: k for k, v in _DTYPES.items()}


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    path = Path(path)
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    chunks = [struct.pack("<4sII", _MAGIC, _VERSION, len(meta_bytes)), meta_bytes,
              struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])     # tobytes(order="C") handles layout
        code = _DTYPES.get(arr.dtype.newbyteorder("<").str)
        if code is None:
            arr = arr.astype("<f8")
            code = _DTYPES["<f8"]
        name_b = name.encode()
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I" if arr.ndim else "<0I", *arr.shape))
        chunks.append(arr.astype(_DTYPES_REV[code]).tobytes(order="C"))
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


def load_arrays(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    off = struct.calcsize("<4sII")
    magic, version, meta_len = struct.unpack("<4sII", raw[:off])
    if magic != _MAGIC:
        raise ValueError(f"not a checkpoint file (magic {magic!r})")
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    meta = json.loads(raw[off:off + meta_len].decode())
    off += meta_len
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + name_len].decode()
        off += name_len
        code, ndim = struct.unpack_from("<BB", raw, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", raw, off) if ndim else ()
        off += 4 * ndim
        dtype = np.dtype(_DTYPES_REV[code])
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if shape else dtype.itemsize
        arrays[name] = np.frombuffer(raw[off:off + n_bytes], dtype=dtype).reshape(shape).copy()
        off += n_bytes
    return meta, arrays


def load_into(params: dict[str, Tensor], arrays: dict[str, np.ndarray],
              prefix: str = "") -> None:
    """Copy stored arrays into live parameters; shapes must match exactly."""
    for name, p in params.items():
        key = prefix + name
        if key not in arrays:
            raise KeyError(f"checkpoint missing parameter {key!r}")
        stored = arrays[key]
        if stored.shape != p.data.shape:
            raise ValueError(
                f"shape mismatch for {key!r}: checkpoint {stored.shape}, model {p.data.shape}")
        p.data = stored.astype(p.data.dtype, copy=True)
