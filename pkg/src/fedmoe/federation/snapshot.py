"""Binary on-disk format for per-round server state.

Layout (all integers little-endian):

    magic       8 bytes  b"FMSNAP01"
    strategy    u32 length + utf-8 bytes
    round       u64
    n_entries   u64
    entry*      u32 label length + utf-8 label,
                u32 ndim, u64 * ndim extents,
                float64 little-endian values (row-major)

Entries are written in sorted label order, so identical state produces
identical bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

__all__ = ["write_snapshot", "read_snapshot"]

MAGIC = b"FMSNAP01"


def write_snapshot(path: str | Path, strategy: str, round_index: int, entries: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    sid = strategy.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(sid)))
        fh.write(sid)
        fh.write(struct.pack("<Q", int(round_index)))
        fh.write(struct.pack("<Q", len(entries)))
        for label in sorted(entries):
            arr = np.ascontiguousarray(entries[label], dtype="<f8")
            lab = label.encode("utf-8")
            fh.write(struct.pack("<I", len(lab)))
            fh.write(lab)
            fh.write(struct.pack("<I", arr.ndim))
            for extent in arr.shape:
                fh.write(struct.pack("<Q", extent))
            fh.write(arr.tobytes())


def read_snapshot(path: str | Path) -> tuple[str, int, dict[str, np.ndarray]]:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path}: not a round snapshot file")
        (slen,) = struct.unpack("<I", fh.read(4))
        strategy = fh.read(slen).decode("utf-8")
        (round_index,) = struct.unpack("<Q", fh.read(8))
        (n_entries,) = struct.unpack("<Q", fh.read(8))
        entries: dict[str, np.ndarray] = {}
        for _ in range(n_entries):
            (llen,) = struct.unpack("<I", fh.read(4))
            label = fh.read(llen).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape)
            entries[label] = data.astype(np.float64)
        return strategy, round_index, entries
