"""Binary checkpoint container shared by the generator and discriminator.

Layout (all integers little-endian)::

    magic        8 bytes   b"MGSECKPT"
    version      uint32    currently 1
    header_len   uint32
    header       UTF-8 JSON {"kind": ..., "config": {...}}
    n_tensors    uint32
    per tensor:
        name_len uint16, name UTF-8
        dtype    uint8     0 = float32, 1 = float64
        ndim     uint8, then ndim x uint32 dims
        data     row-major little-endian values
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MGSECKPT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


def save(path, kind: str, config: dict, tensors: dict[str, np.ndarray]) -> None:
    header = json.dumps({"kind": kind, "config": config}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(header)), header, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        code = _CODES[arr.dtype]
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack(f"<BB{arr.ndim}I", code, arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    try:
        version, hlen = struct.unpack_from("<II", data, 8)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos = 16
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        tensors = {}
        for _ in range(n):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            code, ndim = struct.unpack_from("<BB", data, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            dt = _DTYPES[code]
            count = int(np.prod(shape))
            end = pos + count * dt.itemsize
            if end > len(data):
                raise CheckpointError(f"{path}: truncated tensor {name}")
            tensors[name] = np.frombuffer(data[pos:end], dtype=dt).reshape(shape).copy()
            pos = end
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint ({e})") from e
    return header["kind"], header["config"], tensors
