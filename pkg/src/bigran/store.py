"""Disk-resident fixed-record store of dense answer vectors (BGD1).

Layout: ``magic | dim u32 | count u64 | count*dim float32 | crc32(payload)``.
Record ``r`` starts at byte ``16 + 4*dim*r``.  Fetches deduplicate and sort
ids so reads walk the file in ascending offset order, then expand back to
the caller's order.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .binio import Writer
from .core import VectorSet
from .errors import ContractError, FormatError

BGD1_MAGIC = b"BGD1"
HEADER = 16


@dataclass(frozen=True)
class DenseStore:
    path: Path
    dim: int
    count: int

    def record_offset(self, r: int) -> int:
        return HEADER + r * self.dim * 4

    def fetch(self, ids) -> np.ndarray:
        return fetch_dense(self, ids)

    @property
    def nbytes(self) -> int:
        return HEADER + self.count * self.dim * 4 + 4


def write_dense_store(vectors: VectorSet, path: str | os.PathLike) -> DenseStore:
    w = Writer(BGD1_MAGIC)
    w.pack("IQ", vectors.dim, vectors.count)
    w.begin_checksum()
    w.array(vectors.vectors, "f4")
    w.write(path)
    return DenseStore(Path(path), vectors.dim, vectors.count)


def open_dense_store(path: str | os.PathLike, verify_crc: bool = False) -> DenseStore:
    """Validate header and file length; ``verify_crc`` also reads the payload."""
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as fh:
        head = fh.read(HEADER)
    if len(head) < HEADER:
        raise FormatError(f"{path}: truncated header ({len(head)} of {HEADER} bytes)")
    if head[:4] != BGD1_MAGIC:
        raise FormatError(f"{path}: bad magic {head[:4]!r} at offset 0")
    dim, count = struct.unpack_from("<IQ", head, 4)
    if dim == 0:
        raise FormatError(f"{path}: dim must be positive (offset 4)")
    expected = HEADER + count * dim * 4 + 4
    if size != expected:
        raise FormatError(f"{path}: length {size} does not match header (expected {expected})")
    if verify_crc:
        data = path.read_bytes()
        (stored,) = struct.unpack_from("<I", data, size - 4)
        if zlib.crc32(data[HEADER : size - 4]) & 0xFFFFFFFF != stored:
            raise FormatError(f"{path}: crc32 mismatch at offset {size - 4}")
    return DenseStore(path, int(dim), int(count))


def fetch_dense(store: DenseStore, ids) -> np.ndarray:
    """Vectors for ``ids`` in input order (duplicates allowed), exact float32 values."""
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    out = np.empty((len(ids), store.dim), dtype=np.float32)
    if ids.size == 0:
        return out
    bad = ids[(ids < 0) | (ids >= store.count)]
    if bad.size:
        raise ContractError(f"dense store: id {int(bad[0])} out of range [0, {store.count})")
    uniq, inverse = np.unique(ids, return_inverse=True)
    rows = np.empty((len(uniq), store.dim), dtype=np.float32)
    rec = store.dim * 4
    # coalesce consecutive ids into single reads
    breaks = np.flatnonzero(np.diff(uniq) != 1) + 1
    starts = np.concatenate([[0], breaks])
    ends = np.concatenate([breaks, [len(uniq)]])
    fd = os.open(store.path, os.O_RDONLY)
    try:
        for s, e in zip(starts, ends):
            n = int(e - s)
            buf = os.pread(fd, n * rec, store.record_offset(int(uniq[s])))
            if len(buf) != n * rec:
                raise FormatError(f"{store.path}: short read at record {int(uniq[s])}")
            rows[s:e] = np.frombuffer(buf, dtype="<f4").reshape(n, store.dim)
    finally:
        os.close(fd)
    out[:] = rows[inverse]
    return out
