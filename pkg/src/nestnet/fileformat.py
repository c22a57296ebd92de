"""The ``AIO1`` binary container.

Layout (all integers little-endian)::

    magic      4s   b"AIO1"
    version    u16
    total_len  u64  byte length of the whole file, trailer included
    meta_len   u32
    meta       UTF-8 JSON (sorted keys)
    n_tensors  u32
    tensors    repeated:
                 name_len u16, name UTF-8
                 kind     u8    0 = float64, 1 = packed integer codes
                 ndim     u8,   shape u32 * ndim
                 kind 0:  float64 * prod(shape), row-major
                 kind 1:  bits u8, scale f64, nbytes u32, packed codes
    crc32      u32  over every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

from .quant import IntTensor, pack_codes, packed_size, unpack_codes

MAGIC = b"AIO1"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<4sHQ")
_KIND_FLOAT, _KIND_INT = 0, 1


class FormatError(Exception):
    """Base class for unreadable model files."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


def dumps(meta: Mapping, tensors: Mapping[str, np.ndarray | IntTensor], version: int = FORMAT_VERSION) -> bytes:
    body = bytearray()
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body += struct.pack("<I", len(meta_bytes)) + meta_bytes
    body += struct.pack("<I", len(tensors))
    for name, value in tensors.items():
        nb = name.encode("utf-8")
        body += struct.pack("<H", len(nb)) + nb
        if isinstance(value, IntTensor):
            shape = value.shape
            body += struct.pack("<BB", _KIND_INT, len(shape)) + struct.pack(f"<{len(shape)}I", *shape)
            packed = pack_codes(value.codes, value.bits)
            body += struct.pack("<BdI", value.bits, value.scale, len(packed)) + packed
        else:
            arr = np.asarray(value, dtype="<f8")
            body += struct.pack("<BB", _KIND_FLOAT, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
            body += arr.tobytes()
    total = _HEAD.size + len(body) + 4
    head = _HEAD.pack(MAGIC, version, total)
    payload = head + bytes(body)
    return payload + struct.pack("<I", zlib.crc32(payload))


class _Reader:
    def __init__(self, buf: bytes, pos: int):
        self.buf, self.pos = buf, pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError("file ends inside a record")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def loads(buf: bytes, accept_versions: tuple[int, ...] = (FORMAT_VERSION,)):
    """Parse a container; returns ``(meta, tensors)``."""
    if len(buf) < len(MAGIC):
        raise TruncatedError("file shorter than the magic number")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}")
    if len(buf) < _HEAD.size:
        raise TruncatedError("file shorter than the header")
    _, version, total = _HEAD.unpack_from(buf)
    if version not in accept_versions:
        raise VersionError(f"format version {version} not supported (reader accepts {list(accept_versions)})")
    if len(buf) < total:
        raise TruncatedError(f"file has {len(buf)} bytes, header declares {total}")
    if len(buf) > total:
        raise FormatError(f"{len(buf) - total} trailing bytes after the checksum")
    (crc,) = struct.unpack_from("<I", buf, total - 4)
    if zlib.crc32(buf[: total - 4]) != crc:
        raise ChecksumError("CRC32 mismatch")

    r = _Reader(buf[: total - 4], _HEAD.size)
    (meta_len,) = r.unpack("<I")
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray | IntTensor] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        kind, ndim = r.unpack("<BB")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        if kind == _KIND_FLOAT:
            tensors[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
        elif kind == _KIND_INT:
            bits, scale, nbytes = r.unpack("<BdI")
            if nbytes != packed_size(n, bits):
                raise FormatError(f"{name}: packed size {nbytes} inconsistent with shape and bits")
            codes = unpack_codes(r.take(nbytes), n, bits).reshape(shape)
            tensors[name] = IntTensor(shape, codes, bits, scale)
        else:
            raise FormatError(f"{name}: unknown tensor kind {kind}")
    if r.pos != len(r.buf):
        raise FormatError("unparsed bytes before the checksum")
    return meta, tensors


def write(path: str | Path, meta: Mapping, tensors: Mapping) -> int:
    data = dumps(meta, tensors)
    Path(path).write_bytes(data)
    return len(data)


def read(path: str | Path, accept_versions: tuple[int, ...] = (FORMAT_VERSION,)):
    return loads(Path(path).read_bytes(), accept_versions)
