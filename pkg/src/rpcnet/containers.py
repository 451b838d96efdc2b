"""Single-file binary container: JSON header plus raw little-endian array blocks.

Layout::

    offset 0   4 bytes   magic b"RPCN"
           4   uint16    format version (little-endian)
           6   uint16    reserved, zero
           8   uint32    header length H in bytes
          12   H bytes   UTF-8 JSON header
      12 + H   ...       array blocks, back to back, in header order
       end-4   uint32    CRC-32 of every preceding byte

The header holds ``kind`` (``trial``, ``processed``, ``checkpoint`` ...),
free-form ``meta`` and an ``arrays`` list of ``{name, dtype, shape}``
records.  Dtypes are numpy strings with explicit little-endian byte order
(``<i2``, ``<f4``, ``<f8``, ``|u1``).
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CorruptContainerError, UnsupportedVersionError

MAGIC = b"RPCN"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sHHI")


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">" or (arr.dtype.byteorder == "=" and not np.little_endian):
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def encode(kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    blocks = []
    records = []
    for name, arr in arrays.items():
        arr = _le(np.asarray(arr))
        records.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        blocks.append(arr.tobytes())
    header = json.dumps({"kind": kind, "meta": meta, "arrays": records}, sort_keys=True).encode()
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, 0, len(header)) + header + b"".join(blocks)
    return body + struct.pack("<I", zlib.crc32(body))


def write(path: str | Path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    data = encode(kind, meta, arrays)
    tmp = path.with_name(path.name + ".part")
    tmp.write_bytes(data)
    tmp.replace(path)


def decode(data: bytes, source: str = "<bytes>") -> tuple[str, dict, dict[str, np.ndarray]]:
    if len(data) < _PREFIX.size + 4:
        raise CorruptContainerError(f"{source}: file too short to be a container")
    magic, version, _, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CorruptContainerError(f"{source}: bad magic {magic!r}")
    if version > FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"{source}: container version {version} is newer than supported version {FORMAT_VERSION}"
        )
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CorruptContainerError(f"{source}: checksum mismatch (truncated or damaged)")
    try:
        header = json.loads(data[_PREFIX.size:_PREFIX.size + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptContainerError(f"{source}: unreadable header ({exc})") from None
    pos = _PREFIX.size + hlen
    end = len(data) - 4
    arrays = {}
    for rec in header.get("arrays", []):
        dt = np.dtype(rec["dtype"])
        count = int(np.prod(rec["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        if pos + nbytes > end:
            raise CorruptContainerError(f"{source}: array {rec['name']!r} runs past the end of the file")
        arrays[rec["name"]] = np.frombuffer(data, dtype=dt, count=count, offset=pos).reshape(rec["shape"]).copy()
        pos += nbytes
    if pos != end:
        raise CorruptContainerError(f"{source}: {end - pos} unexpected trailing bytes")
    return header["kind"], header.get("meta", {}), arrays


def read(path: str | Path, expect_kind: str | None = None):
    path = Path(path)
    kind, meta, arrays = decode(path.read_bytes(), str(path))
    if expect_kind is not None and kind != expect_kind:
        raise CorruptContainerError(f"{path}: expected a {expect_kind!r} container, found {kind!r}")
    return kind, meta, arrays
