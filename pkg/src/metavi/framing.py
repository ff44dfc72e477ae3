"""Binary container shared by checkpoints and persisted datasets.

Layout (little-endian)::

    magic      4 bytes    b"MVI1" (checkpoints) / b"MVD1" (datasets)
    version    u32
    hdr_len    u32
    header     hdr_len bytes of UTF-8 JSON; header["blocks"] lists
               {"name", "shape"} in payload order
    payload    raw f64 blocks
    crc32      u32 over every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class FormatError(ValueError):
    """Base class for container parse failures."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


def encode(magic: bytes, header: dict, blocks: dict[str, np.ndarray], version: int = FORMAT_VERSION) -> bytes:
    header = dict(header)
    header["blocks"] = [{"name": k, "shape": list(np.shape(v))} for k, v in blocks.items()]
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [magic, struct.pack("<II", version, len(hdr)), hdr]
    for v in blocks.values():
        parts.append(np.ascontiguousarray(v, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(raw: bytes, magic: bytes, version: int = FORMAT_VERSION) -> tuple[dict, dict[str, np.ndarray]]:
    if len(raw) < 16:
        raise TruncatedError(f"{len(raw)} bytes is shorter than the fixed header")
    if raw[:4] != magic:
        raise BadMagicError(f"expected magic {magic!r}, found {raw[:4]!r}")
    got_version, hdr_len = struct.unpack_from("<II", raw, 4)
    if got_version != version:
        raise VersionError(f"format version {got_version}, this build reads {version}")
    if 12 + hdr_len + 4 > len(raw):
        raise TruncatedError("header extends past end of file")
    header = json.loads(raw[12 : 12 + hdr_len].decode("utf-8"))
    sizes = [int(np.prod(b["shape"], dtype=np.int64)) for b in header["blocks"]]
    expected = 12 + hdr_len + 8 * sum(sizes) + 4
    if len(raw) < expected:
        raise TruncatedError(f"expected {expected} bytes, file has {len(raw)}")
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if len(raw) != expected or zlib.crc32(raw[:-4]) & 0xFFFFFFFF != crc:
        raise ChecksumError("CRC32 mismatch; file is corrupt")
    blocks = {}
    off = 12 + hdr_len
    for spec, n in zip(header["blocks"], sizes):
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).astype(np.float64)
        blocks[spec["name"]] = arr.reshape(spec["shape"])
        off += 8 * n
    return header, blocks


def write(path, magic: bytes, header: dict, blocks: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(magic, header, blocks))
    tmp.replace(path)


def read(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes(), magic)
