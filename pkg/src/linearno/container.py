"""Binary tensor container.

Layout (all integers little-endian):

    magic   4 bytes  b"LNOC"
    version u32      (currently 1)
    count   u32      number of sections
    per section:
        name_len u16, name UTF-8 bytes
        dtype    u8   (0 = float64, 1 = float32, 2 = uint64)
        ndim     u8
        dims     ndim x u64
        payload  row-major little-endian bytes
        crc32    u32  of the payload
    crc32   u32      of every preceding byte in the file

Readers validate the magic, version, whole-file checksum, every
structural length and every section checksum; any violation raises a
``ContainerError`` subclass — corrupted input must never crash the
process or load silently.
"""
from __future__ import annotations

import json
import struct
import zlib

import numpy as np

MAGIC = b"LNOC"
VERSION = 1

_DTYPE_CODES = {np.dtype("<f8"): 0, np.dtype("<f4"): 1, np.dtype("<u8"): 2}
_CODE_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<u8")}
_MAX_NDIM = 32


class ContainerError(Exception):
    """Malformed or corrupted container data."""


class MagicError(ContainerError):
    """The file does not start with the container magic."""


class VersionError(ContainerError):
    """Unsupported container version."""


class DtypeError(ContainerError):
    """Unknown dtype code, or an array dtype the format cannot store."""


class TruncatedError(ContainerError):
    """The data ends before a declared structure is complete."""


class ChecksumError(ContainerError):
    """A section or whole-file CRC32 does not match its payload."""


def to_bytes(sections):
    """Serialise ``{name: ndarray}`` (insertion-ordered) to container bytes."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(sections))]
    seen = set()
    for name, arr in sections.items():
        if name in seen:
            raise ContainerError(f"duplicate section name {name!r}")
        seen.add(name)
        arr = np.asarray(arr)
        key = arr.dtype.newbyteorder("<")
        if key not in _DTYPE_CODES:
            raise DtypeError(f"section {name!r}: dtype {arr.dtype} not storable "
                             "(float64, float32, uint64 only)")
        name_b = name.encode("utf-8")
        if len(name_b) > 0xFFFF:
            raise ContainerError(f"section name too long ({len(name_b)} bytes)")
        if arr.ndim > _MAX_NDIM:
            raise ContainerError(f"section {name!r}: ndim {arr.ndim} exceeds {_MAX_NDIM}")
        payload = np.ascontiguousarray(arr, dtype=key).tobytes()
        parts.append(struct.pack("<H", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<BB", _DTYPE_CODES[key], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(payload)
        parts.append(struct.pack("<I", zlib.crc32(payload)))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise TruncatedError(f"file ends inside {what} "
                                 f"(need {n} bytes at offset {self.pos})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u(self, fmt, what):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))


def from_bytes(data):
    """Parse container bytes back into ``{name: ndarray}``."""
    if not isinstance(data, (bytes, bytearray, memoryview)):
        raise ContainerError("expected bytes")
    data = bytes(data)
    if len(data) < 4:
        raise TruncatedError("file shorter than the magic")
    if data[:4] != MAGIC:
        raise MagicError(f"bad magic {data[:4]!r}")
    if len(data) < 16:
        raise TruncatedError("file shorter than the fixed header")
    declared = struct.unpack("<I", data[-4:])[0]
    actual = zlib.crc32(data[:-4])
    if declared != actual:
        raise ChecksumError(f"whole-file CRC mismatch ({declared:#x} != {actual:#x})")
    r = _Reader(data[:-4])
    r.take(4, "magic")
    (version, count) = r.u("<II", "header")
    if version != VERSION:
        raise VersionError(f"unsupported container version {version}")
    sections = {}
    for i in range(count):
        (name_len,) = r.u("<H", f"section {i} name length")
        try:
            name = r.take(name_len, f"section {i} name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise ContainerError(f"section {i} name is not valid UTF-8") from e
        (code, ndim) = r.u("<BB", f"section {name!r} descriptor")
        if code not in _CODE_DTYPES:
            raise DtypeError(f"section {name!r}: unknown dtype code {code}")
        if ndim > _MAX_NDIM:
            raise ContainerError(f"section {name!r}: ndim {ndim} exceeds {_MAX_NDIM}")
        dims = r.u(f"<{ndim}Q", f"section {name!r} dims")
        dtype = _CODE_DTYPES[code]
        n_items = 1
        for d in dims:
            n_items *= d
        n_bytes = n_items * dtype.itemsize
        if r.pos + n_bytes + 4 > len(r.data):
            raise TruncatedError(f"section {name!r}: payload of {n_bytes} bytes "
                                 "does not fit in the file")
        payload = r.take(n_bytes, f"section {name!r} payload")
        (crc,) = r.u("<I", f"section {name!r} checksum")
        if crc != zlib.crc32(payload):
            raise ChecksumError(f"section {name!r}: payload CRC mismatch")
        if name in sections:
            raise ContainerError(f"duplicate section name {name!r}")
        arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
        sections[name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    if r.pos != len(r.data):
        raise ContainerError(f"{len(r.data) - r.pos} unparsed bytes after the last section")
    return sections


def save(path, sections):
    """Write sections to ``path`` atomically (write-then-rename)."""
    import os
    blob = to_bytes(sections)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def load(path):
    with open(path, "rb") as f:
        return from_bytes(f.read())


# ---- small helpers for non-tensor metadata --------------------------------

def pack_text(s):
    """UTF-8 text as a u64 array (one code unit per element)."""
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8).astype(np.uint64)


def unpack_text(arr):
    return np.asarray(arr, dtype=np.uint64).astype(np.uint8).tobytes().decode("utf-8")


def pack_json(obj):
    return pack_text(json.dumps(obj, sort_keys=True, separators=(",", ":")))


def unpack_json(arr):
    return json.loads(unpack_text(arr))
