"""Checksummed binary container shared by every artifact file.

Layout (little-endian)::

    magic      8 bytes
    version    u32
    hdr_len    u32
    header     hdr_len bytes of UTF-8 JSON
    body_len   u64
    body       body_len bytes
    crc32      u32 over everything above
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

_PREFIX = struct.Struct("<8sII")
_BODY_LEN = struct.Struct("<Q")
_CRC = struct.Struct("<I")


class FormatError(ValueError):
    """Base class for artifact parse errors."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


def dump_json(obj) -> str:
    """Canonical JSON: sorted keys, no whitespace, repr-exact floats."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def pack(magic: bytes, version: int, header: dict, body: bytes) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    hdr = dump_json(header).encode("utf-8")
    blob = _PREFIX.pack(magic, version, len(hdr)) + hdr + _BODY_LEN.pack(len(body)) + body
    return blob + _CRC.pack(zlib.crc32(blob) & 0xFFFFFFFF)


def unpack(blob: bytes, magic: bytes, version: int) -> tuple[dict, bytes]:
    """Validate and split a container; raises a specific FormatError subclass."""
    if len(blob) < _PREFIX.size or blob[:8] != magic:
        raise BadMagicError(f"bad magic: expected {magic!r}, got {bytes(blob[:8])!r}")
    _, found_version, hdr_len = _PREFIX.unpack_from(blob, 0)
    if found_version != version:
        raise VersionMismatchError(f"format version {found_version}, expected {version}")
    pos = _PREFIX.size
    if len(blob) < pos + hdr_len + _BODY_LEN.size:
        raise TruncatedFileError("file ends inside the header")
    hdr_bytes = blob[pos:pos + hdr_len]
    pos += hdr_len
    (body_len,) = _BODY_LEN.unpack_from(blob, pos)
    pos += _BODY_LEN.size
    if len(blob) != pos + body_len + _CRC.size:
        raise TruncatedFileError(
            f"declared body of {body_len} bytes but file holds {len(blob) - pos - _CRC.size}")
    body = blob[pos:pos + body_len]
    (crc,) = _CRC.unpack_from(blob, pos + body_len)
    if crc != zlib.crc32(blob[:pos + body_len]) & 0xFFFFFFFF:
        raise ChecksumError("CRC32 mismatch")
    try:
        header = json.loads(hdr_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}") from exc
    return header, bytes(body)


def atomic_write(path, data: bytes | str) -> None:
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode) as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
