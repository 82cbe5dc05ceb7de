"""Binary file formats.

Tensor files ("MPTR"): magic, u32 version=1, u32 rank=4, four u32
little-endian dims, then the float32 little-endian payload.

Checkpoint files ("MPCK"): magic, u32 version=1, u32 flags (bit 0 marks a
structurally pruned model), u32 record count, then length-prefixed named
records. Records whose names start with "json:" carry UTF-8 JSON; all other
records carry an MPTR blob (arrays of lower rank are padded with trailing
unit dims and restored from the name's known shape on load).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

__all__ = [
    "write_tensor", "read_tensor", "tensor_to_bytes", "tensor_from_bytes",
    "write_checkpoint", "read_checkpoint", "FLAG_PRUNED",
]

_MPTR_MAGIC = b"MPTR"
_MPCK_MAGIC = b"MPCK"
_VERSION = 1

FLAG_PRUNED = 1


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    a = np.asarray(arr, dtype=np.float32)
    if a.ndim > 4:
        raise FormatError(f"cannot encode rank-{a.ndim} array")
    shape = tuple(a.shape) + (1,) * (4 - a.ndim)
    header = struct.pack("<4sII4I", _MPTR_MAGIC, _VERSION, 4, *shape)
    return header + a.reshape(shape).astype("<f4").tobytes()


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < 28:
        raise FormatError(f"tensor blob truncated: {len(blob)} bytes")
    magic, version, rank, d0, d1, d2, d3 = struct.unpack("<4sII4I", blob[:28])
    if magic != _MPTR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    if version != _VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    if rank != 4:
        raise FormatError(f"unsupported tensor rank {rank}")
    count = d0 * d1 * d2 * d3
    expected = 28 + 4 * count
    if len(blob) != expected:
        raise FormatError(f"tensor payload length {len(blob)} != expected {expected}")
    arr = np.frombuffer(blob, dtype="<f4", offset=28, count=count).reshape(d0, d1, d2, d3)
    arr = np.ascontiguousarray(arr)
    if not np.all(np.isfinite(arr)):
        raise FormatError("tensor payload contains non-finite values")
    return arr


def write_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def read_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def _pack_record(name: str, payload: bytes) -> bytes:
    nb = name.encode("utf-8")
    return struct.pack("<I", len(nb)) + nb + struct.pack("<I", len(payload)) + payload


def write_checkpoint(path, arrays: dict[str, np.ndarray],
                     meta: dict | None = None, flags: int = 0) -> None:
    """Write named arrays plus a JSON metadata record.

    Record order follows the dict insertion order so identical inputs
    produce byte-identical files.
    """
    records: list[bytes] = []
    if meta is not None:
        payload = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
        records.append(_pack_record("json:meta", payload))
    for name, arr in arrays.items():
        records.append(_pack_record(name, tensor_to_bytes(arr)))
    header = struct.pack("<4sIII", _MPCK_MAGIC, _VERSION, flags, len(records))
    Path(path).write_bytes(header + b"".join(records))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict, int]:
    """Read a checkpoint; returns (arrays, meta, flags)."""
    blob = Path(path).read_bytes()
    if len(blob) < 16:
        raise FormatError(f"checkpoint truncated: {len(blob)} bytes")
    magic, version, flags, count = struct.unpack("<4sIII", blob[:16])
    if magic != _MPCK_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != _VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off = 16
    arrays: dict[str, np.ndarray] = {}
    meta: dict = {}
    for _ in range(count):
        if off + 4 > len(blob):
            raise FormatError("checkpoint record header truncated")
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (plen,) = struct.unpack_from("<I", blob, off)
        off += 4
        payload = blob[off:off + plen]
        if len(payload) != plen:
            raise FormatError(f"checkpoint record {name!r} truncated")
        off += plen
        if name.startswith("json:"):
            meta = json.loads(payload.decode("utf-8"))
        else:
            arrays[name] = tensor_from_bytes(payload)
    if off != len(blob):
        raise FormatError(f"checkpoint has {len(blob) - off} trailing bytes")
    return arrays, meta, flags
