"""Binary tensor container shared by model and attention checkpoints.

Layout: magic (4 bytes) | version (1 byte) | header length (uint32 LE) |
header JSON (utf-8) | concatenated little-endian tensor payloads in header
order. The header records tensor names, dtypes and shapes plus arbitrary
caller metadata, so a payload is self-describing and round-trips bitwise.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError

_VERSION = 1


def pack(magic: bytes, header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be exactly 4 bytes")
    specs = []
    payload = bytearray()
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        specs.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape),
                      "nbytes": len(raw)})
        payload.extend(raw)
    full_header = dict(header)
    full_header["tensors"] = specs
    header_bytes = json.dumps(full_header, sort_keys=True).encode("utf-8")
    return b"".join([magic, bytes([_VERSION]), struct.pack("<I", len(header_bytes)),
                     header_bytes, bytes(payload)])


def unpack(data: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < 9:
        raise FormatError("container truncated before header length")
    if data[:4] != magic:
        raise FormatError(f"bad magic {data[:4]!r}, expected {magic!r}")
    if data[4] != _VERSION:
        raise FormatError(f"unsupported container version {data[4]}")
    (header_len,) = struct.unpack("<I", data[5:9])
    if len(data) < 9 + header_len:
        raise FormatError("container truncated inside header")
    try:
        header = json.loads(data[9:9 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt container header: {exc}") from exc
    offset = 9 + header_len
    tensors: dict[str, np.ndarray] = {}
    for spec in header.get("tensors", []):
        nbytes = spec["nbytes"]
        chunk = data[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise FormatError(f"container truncated inside tensor {spec['name']!r}")
        dtype = np.dtype(spec["dtype"]).newbyteorder("<")
        arr = np.frombuffer(chunk, dtype=dtype).reshape(spec["shape"])
        tensors[spec["name"]] = arr.astype(np.dtype(spec["dtype"]), copy=True)
        offset += nbytes
    if offset != len(data):
        raise FormatError("container has trailing bytes after declared payload")
    return header, tensors
