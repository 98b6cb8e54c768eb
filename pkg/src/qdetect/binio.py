"""Low-level helpers shared by the QIMG/QMLP/QLUT/QVIT binary formats.

All formats are little-endian, start with a 4-byte ASCII magic followed by a
u16 format version, and are written atomically (temp file + rename) so a
crashed writer never leaves a half-written artifact behind.  Readers fail
with distinct error types for bad magic, unsupported version, and truncation.
"""

from __future__ import annotations

import os
import struct
from contextlib import contextmanager

import numpy as np

from .errors import FormatMagicError, FormatVersionError, TruncatedFileError

MAGIC_QIMG = b"QIMG"
MAGIC_QMLP = b"QMLP"
MAGIC_QLUT = b"QLUT"
MAGIC_QVIT = b"QVIT"

KNOWN_MAGICS = (MAGIC_QIMG, MAGIC_QMLP, MAGIC_QLUT, MAGIC_QVIT)


class Reader:
    """Cursor over an in-memory byte buffer with truncation checking."""

    def __init__(self, data: bytes, name: str = "<bytes>"):
        self.data = data
        self.pos = 0
        self.name = name

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"{self.name}: needed {n} bytes at offset {self.pos}, "
                f"only {len(self.data) - self.pos} remain"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals if len(vals) > 1 else vals[0]

    def array(self, dtype, count: int) -> np.ndarray:
        dtype = np.dtype(dtype).newbyteorder("<")
        raw = self.take(dtype.itemsize * count)
        return np.frombuffer(raw, dtype=dtype).copy()

    def expect_magic(self, magic: bytes) -> None:
        found = self.take(4)
        if found != magic:
            raise FormatMagicError(magic, found)

    def expect_version(self, version: int) -> None:
        found = self.unpack("H")
        if found != version:
            raise FormatVersionError(version, found)

    def expect_end(self) -> None:
        if self.pos != len(self.data):
            raise TruncatedFileError(
                f"{self.name}: {len(self.data) - self.pos} trailing bytes "
                f"after offset {self.pos}"
            )


class Writer:
    """Accumulates little-endian fields into a byte buffer."""

    def __init__(self):
        self.chunks: list[bytes] = []

    def pack(self, fmt: str, *vals) -> None:
        self.chunks.append(struct.pack("<" + fmt, *vals))

    def raw(self, data: bytes) -> None:
        self.chunks.append(bytes(data))

    def array(self, arr: np.ndarray, dtype) -> None:
        dtype = np.dtype(dtype).newbyteorder("<")
        self.chunks.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self.chunks)


def read_file(path) -> Reader:
    with open(path, "rb") as fh:
        return Reader(fh.read(), name=str(path))


def write_file(path, payload: bytes) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def peek_magic(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read(4)


@contextmanager
def open_reader(path, magic: bytes, version: int):
    """Read a whole artifact, check magic/version, and verify full consumption."""
    r = read_file(path)
    r.expect_magic(magic)
    r.expect_version(version)
    yield r
    r.expect_end()
