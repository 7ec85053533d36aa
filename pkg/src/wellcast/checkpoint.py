"""Flat binary checkpoint container.

Layout (all integers little-endian):

    magic    4 bytes  b"GCK1"
    count    uint32   number of records
    record*  uint32 name length, name (utf-8),
             uint32 ndim, uint32 * ndim dims,
             uint64 payload bytes, payload (little-endian float64)

Record order is preserved and the float payload is written bit-exactly, so
save -> load -> save reproduces identical bytes.
"""

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"GCK1"


def pack_records(records: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(records))]
    for name, arr in records.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        name_b = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload = arr.tobytes()
        parts.append(struct.pack("<Q", len(payload)))
        parts.append(payload)
    return b"".join(parts)


def unpack_records(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise FormatError("not a GCK1 checkpoint (bad magic bytes)")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise FormatError("truncated checkpoint")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    (count,) = take("<I")
    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<I")
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = take("<I")
        dims = take(f"<{ndim}I") if ndim else ()
        (nbytes,) = take("<Q")
        if pos + nbytes > len(blob):
            raise FormatError("truncated checkpoint payload")
        arr = np.frombuffer(blob[pos:pos + nbytes], dtype="<f8").reshape(dims)
        pos += nbytes
        records[name] = arr.copy()
    if pos != len(blob):
        raise FormatError("trailing bytes after final record")
    return records


def save(path, records: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(pack_records(records))


def load(path) -> dict[str, np.ndarray]:
    return unpack_records(Path(path).read_bytes())
