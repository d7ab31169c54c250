"""Little-endian framing helpers for the BG* artifact formats.

Every format is ``magic | header fields | payload | crc32``.  By default the
checksum covers everything between the magic and the checksum itself; the
vector formats (BGV1, BGD1) checksum the payload only, which callers select
with ``begin_checksum()`` after writing/reading the header.
"""

from __future__ import annotations

import hashlib
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import FormatError


class Writer:
    """Accumulates a framed record in memory, then writes it atomically."""

    def __init__(self, magic: bytes):
        assert len(magic) == 4
        self.magic = magic
        self._parts: list[bytes] = []
        self._crc_from = 0

    def begin_checksum(self) -> None:
        self._crc_from = len(self._parts)

    def pack(self, fmt: str, *values) -> None:
        self._parts.append(struct.pack("<" + fmt, *values))

    def array(self, arr: np.ndarray, dtype: str) -> None:
        self._parts.append(np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())

    def raw(self, data: bytes) -> None:
        self._parts.append(data)

    def getvalue(self) -> bytes:
        body = b"".join(self._parts)
        covered = b"".join(self._parts[self._crc_from :])
        return self.magic + body + struct.pack("<I", zlib.crc32(covered) & 0xFFFFFFFF)

    def write(self, path: str | os.PathLike) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.getvalue())
        os.replace(tmp, path)


class Reader:
    """Sequential reader over a framed record; all errors name the byte offset."""

    def __init__(self, data: bytes, magic: bytes, what: str = "file"):
        self.what = what
        if len(data) < 8:
            raise FormatError(f"{what}: truncated at offset {len(data)} (need at least 8 bytes)")
        if data[:4] != magic:
            raise FormatError(f"{what}: bad magic {data[:4]!r} at offset 0, expected {magic!r}")
        self.data = data
        self.pos = 4
        self.end = len(data) - 4
        self._crc_from = 4

    def begin_checksum(self) -> None:
        self._crc_from = self.pos

    @classmethod
    def open(cls, path: str | os.PathLike, magic: bytes) -> "Reader":
        return cls(Path(path).read_bytes(), magic, what=str(path))

    def _need(self, n: int) -> None:
        if self.pos + n > self.end:
            raise FormatError(
                f"{self.what}: truncated payload at offset {self.pos} "
                f"(need {n} bytes, {max(self.end - self.pos, 0)} available)"
            )

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        n = struct.calcsize(fmt)
        self._need(n)
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += n
        return out if len(out) > 1 else out[0]

    def array(self, dtype: str, count: int, finite: bool = False) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        n = dt.itemsize * count
        self._need(n)
        start = self.pos
        arr = np.frombuffer(self.data, dtype=dt, count=count, offset=start).astype(np.dtype(dtype))
        self.pos += n
        if finite and count:
            bad = np.flatnonzero(~np.isfinite(arr))
            if bad.size:
                raise FormatError(
                    f"{self.what}: non-finite value at offset {start + int(bad[0]) * dt.itemsize}"
                )
        return arr

    def raw(self, n: int) -> bytes:
        self._need(n)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def finish(self) -> None:
        """Check that the payload is fully consumed and the checksum matches."""
        if self.pos != self.end:
            raise FormatError(f"{self.what}: {self.end - self.pos} trailing bytes at offset {self.pos}")
        (stored,) = struct.unpack_from("<I", self.data, self.end)
        actual = zlib.crc32(self.data[self._crc_from : self.end]) & 0xFFFFFFFF
        if stored != actual:
            raise FormatError(f"{self.what}: crc32 mismatch at offset {self.end}")


def content_hash(data: bytes) -> str:
    """Short stable content hash used for the artifact hash chain."""
    return hashlib.sha256(data).hexdigest()[:16]


def file_hash(path: str | os.PathLike) -> str:
    return content_hash(Path(path).read_bytes())
