"""Binary weight snapshots.

Layout (all integers little-endian uint32):

    magic  b"DPGW"
    version = 1
    count
    count x [ name_len | name utf-8 | rank | dims... | float32 data LE ]

Entries cover every trainable parameter and every batch-norm running
statistic (as ``<layer>.running_mean`` / ``<layer>.running_var``), in the
store's registration order. Values are stored as float32; a float32
store round-trips bit-exactly.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import FormatError
from .optim import ParamStore

MAGIC = b"DPGW"
VERSION = 1


def save_weights(store: ParamStore, path: str) -> None:
    entries = store.state_arrays()
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", VERSION, len(entries))
    for name, arr in entries:
        raw = name.encode("utf-8")
        blob += struct.pack("<I", len(raw))
        blob += raw
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def _take(blob: bytes, offset: int, n: int, what: str) -> tuple[bytes, int]:
    if offset + n > len(blob):
        raise FormatError(f"weights file truncated while reading {what} "
                          f"(need {n} bytes at offset {offset}, have {len(blob) - offset})")
    return blob[offset:offset + n], offset + n


def read_weight_entries(path: str) -> dict[str, np.ndarray]:
    """Parse a weights file into {name: float32 array}, validating the framing."""
    with open(path, "rb") as fh:
        blob = fh.read()
    chunk, off = _take(blob, 0, 4, "magic")
    if chunk != MAGIC:
        raise FormatError(f"bad magic {chunk!r}, expected {MAGIC!r}")
    chunk, off = _take(blob, off, 8, "header")
    version, count = struct.unpack("<II", chunk)
    if version != VERSION:
        raise FormatError(f"unsupported weights version {version}")
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        chunk, off = _take(blob, off, 4, f"entry {i} name length")
        (name_len,) = struct.unpack("<I", chunk)
        chunk, off = _take(blob, off, name_len, f"entry {i} name")
        name = chunk.decode("utf-8")
        if name in out:
            raise FormatError(f"duplicate entry {name!r}")
        chunk, off = _take(blob, off, 4, f"{name} rank")
        (rank,) = struct.unpack("<I", chunk)
        chunk, off = _take(blob, off, 4 * rank, f"{name} dims")
        shape = struct.unpack(f"<{rank}I", chunk)
        n_vals = int(np.prod(shape, dtype=np.int64)) if rank else 1
        chunk, off = _take(blob, off, 4 * n_vals, f"{name} data")
        out[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
    if off != len(blob):
        raise FormatError(f"{len(blob) - off} trailing bytes after last entry")
    return out


def load_weights(store: ParamStore, path: str) -> None:
    """Fill a store in place from a snapshot; names and shapes must match exactly."""
    entries = read_weight_entries(path)
    expected = dict(store.state_arrays())
    missing = sorted(set(expected) - set(entries))
    extra = sorted(set(entries) - set(expected))
    if missing or extra:
        parts = []
        if missing:
            parts.append("missing: " + ", ".join(missing[:5]) + ("..." if len(missing) > 5 else ""))
        if extra:
            parts.append("unexpected: " + ", ".join(extra[:5]) + ("..." if len(extra) > 5 else ""))
        raise FormatError("weights file does not match the model (" + "; ".join(parts) + ")")
    for name, arr in entries.items():
        dst = expected[name]
        if dst.shape != arr.shape:
            raise FormatError(f"{name}: stored shape {arr.shape} does not match model shape {dst.shape}")
        dst[...] = arr.astype(dst.dtype)
