"""ULKW named-tensor weight files.

Layout (all integers little-endian):
  magic "ULKW" | format version u32 | tensor count u32
  per tensor: name length u16 | UTF-8 name | dtype byte | rank u8
              | extent u32 per dim | raw little-endian payload

dtype byte 0 is float32, 1 is float64. Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

from .errors import BadMagicError, FormatError, TruncatedError

MAGIC = b"ULKW"
FORMAT_VERSION = 1

_DTYPE_TO_CODE = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_tensor_file(path, tensors: "OrderedDict[str, np.ndarray]") -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr)
            le = arr.dtype.newbyteorder("<")
            if le not in _DTYPE_TO_CODE:
                raise FormatError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise FormatError(f"tensor name too long: {name!r}")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<BB", _DTYPE_TO_CODE[le], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype(le, copy=False).tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedError(f"file truncated while reading {what}")
    return buf


def read_tensor_file(path) -> "OrderedDict[str, np.ndarray]":
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    with open(path, "rb") as f:
        magic = f.read(4)
        if len(magic) < 4 or magic != MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported format version {version}")
        for idx in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, f"tensor {idx} name length"))
            name = _read_exact(f, name_len, f"tensor {idx} name").decode("utf-8")
            code, rank = struct.unpack("<BB", _read_exact(f, 2, f"{name} dtype/rank"))
            if code not in _CODE_TO_DTYPE:
                raise FormatError(f"unknown dtype code {code} for tensor {name!r}")
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, f"{name} dims"))
            dtype = _CODE_TO_DTYPE[code]
            n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
            payload = _read_exact(f, n_bytes, f"{name} payload")
            arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
            tensors[name] = arr.astype(arr.dtype.newbyteorder("="))
        if f.read(1):
            raise FormatError("trailing bytes after final tensor")
    return tensors
