"""Binary framing shared by the dataset and checkpoint files.

Layout::

    magic (4 bytes) | version (u8) | payload length (u64 LE) | payload | CRC32 (u32 LE)

The CRC covers the payload only. All numbers inside payloads are little-endian.
"""

from __future__ import annotations

import io
import math
import struct
import zlib
from pathlib import Path

import numpy as np

_HEAD = struct.Struct("<4sBQ")
_CRC = struct.Struct("<I")


class FileFormatError(ValueError):
    pass


class VersionError(FileFormatError):
    pass


class TruncatedFileError(FileFormatError):
    pass


class ChecksumError(FileFormatError):
    pass


def write_framed(path, magic: bytes, version: int, payload: bytes):
    blob = _HEAD.pack(magic, version, len(payload)) + payload + _CRC.pack(zlib.crc32(payload))
    Path(path).write_bytes(blob)


def read_framed(path, magic: bytes, version: int) -> bytes:
    blob = Path(path).read_bytes()
    if len(blob) < _HEAD.size:
        raise TruncatedFileError(f"{path}: file shorter than header")
    got_magic, got_version, n = _HEAD.unpack_from(blob)
    if got_magic != magic:
        raise FileFormatError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if got_version != version:
        raise VersionError(f"{path}: format version {got_version}, expected {version}")
    end = _HEAD.size + n
    if len(blob) < end + _CRC.size:
        raise TruncatedFileError(f"{path}: payload truncated")
    payload = blob[_HEAD.size:end]
    (crc,) = _CRC.unpack_from(blob, end)
    if crc != zlib.crc32(payload):
        raise ChecksumError(f"{path}: CRC32 mismatch")
    return payload


class Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def pack(self, fmt: str, *values):
        self.buf.write(struct.pack("<" + fmt, *values))

    def floats(self, arr):
        self.buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    def raw(self, data: bytes):
        self.pack("I", len(data))
        self.buf.write(data)

    def getvalue(self) -> bytes:
        return self.buf.getvalue()


class Reader:
    def __init__(self, payload: bytes):
        self.data = payload
        self.pos = 0

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError("payload ended early")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        vals = s.unpack(self._take(s.size))
        return vals[0] if len(vals) == 1 else vals

    def floats(self, shape) -> np.ndarray:
        shape = (int(shape),) if np.isscalar(shape) else tuple(int(d) for d in shape)
        count = math.prod(shape)
        arr = np.frombuffer(self._take(8 * count), dtype="<f8").astype(np.float64)
        return arr.reshape(shape)

    def raw(self) -> bytes:
        return self._take(self.unpack("I"))

    def done(self) -> bool:
        return self.pos == len(self.data)
