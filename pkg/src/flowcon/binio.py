"""Little-endian binary container primitives with a trailing CRC32.

All on-disk formats in this package share the same skeleton: a 4-byte magic,
little-endian u32 header fields, format-specific payload, and a CRC32 of all
preceding bytes.  Readers validate magic, version, and CRC and report the
byte offset of the first inconsistency.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import FormatError


class ByteWriter:
    """Accumulates the file body in memory; ``save`` appends the CRC32."""

    def __init__(self, magic: bytes):
        if len(magic) != 4:
            raise ValueError("magic must be 4 bytes")
        self._buf = bytearray(magic)

    def u32(self, value: int) -> None:
        if not (0 <= value <= 0xFFFFFFFF):
            raise ValueError(f"u32 out of range: {value}")
        self._buf += struct.pack("<I", value)

    def raw(self, data: bytes) -> None:
        self._buf += data

    def utf8(self, text: str) -> None:
        payload = text.encode("utf-8")
        self.u32(len(payload))
        self._buf += payload

    def f32_array(self, arr: np.ndarray) -> None:
        self._buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()

    def f64_array(self, arr: np.ndarray) -> None:
        self._buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()

    def save(self, path: str | Path) -> None:
        crc = zlib.crc32(bytes(self._buf)) & 0xFFFFFFFF
        with open(path, "wb") as fh:
            fh.write(self._buf)
            fh.write(struct.pack("<I", crc))


class ByteReader:
    """Reads a whole container, verifying magic and trailing CRC up front."""

    def __init__(self, path: str | Path, magic: bytes):
        self.path = str(path)
        data = Path(path).read_bytes()
        if len(data) < 8:
            raise FormatError(f"{self.path}: truncated container", offset=len(data))
        body, trailer = data[:-4], data[-4:]
        (stored_crc,) = struct.unpack("<I", trailer)
        actual_crc = zlib.crc32(body) & 0xFFFFFFFF
        if stored_crc != actual_crc:
            raise FormatError(
                f"{self.path}: CRC mismatch (stored {stored_crc:#010x}, computed {actual_crc:#010x})",
                offset=len(body))
        if body[:4] != magic:
            raise FormatError(f"{self.path}: bad magic {body[:4]!r}, expected {magic!r}", offset=0)
        self._body = body
        self._pos = 4

    def _take(self, n: int) -> bytes:
        if self._pos + n > len(self._body):
            raise FormatError(f"{self.path}: truncated record", offset=self._pos)
        out = self._body[self._pos:self._pos + n]
        self._pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def utf8(self) -> str:
        n = self.u32()
        try:
            return self._take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{self.path}: invalid UTF-8 ({exc})", offset=self._pos - n)

    def f32_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self._take(4 * count), dtype="<f4").astype(np.float64)

    def f32_raw(self, count: int) -> np.ndarray:
        return np.frombuffer(self._take(4 * count), dtype="<f4").copy()

    def f64_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self._take(8 * count), dtype="<f8").copy()

    def expect_end(self) -> None:
        if self._pos != len(self._body):
            raise FormatError(f"{self.path}: {len(self._body) - self._pos} unexpected trailing bytes",
                              offset=self._pos)

    @property
    def offset(self) -> int:
        return self._pos


def write_named_entries(w: ByteWriter, entries: dict[str, np.ndarray]) -> None:
    """Named tensor block: count, then (name, rank, extents, f64 payload) per entry."""
    w.u32(len(entries))
    for name in sorted(entries):
        arr = np.asarray(entries[name], dtype=np.float64)
        w.utf8(name)
        w.u32(arr.ndim)
        for extent in arr.shape:
            w.u32(extent)
        w.f64_array(arr)


def read_named_entries(r: ByteReader) -> dict[str, np.ndarray]:
    count = r.u32()
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.utf8()
        rank = r.u32()
        if rank > 8:
            raise FormatError(f"{r.path}: implausible rank {rank} for entry {name!r}",
                              offset=r.offset - 4)
        shape = tuple(r.u32() for _ in range(rank))
        size = 1
        for extent in shape:
            size *= extent
        entries[name] = r.f64_array(size).reshape(shape)
    return entries
