"""QVC1 feature cache.

Little-endian layout::

    magic "QVC1" | version u32 | record count u32 | height u32 | width u32 |
    channels u32 | config digest (32 bytes)
    per record: label u8 | id length u16 | UTF-8 id | height*width*channels
    binary32 values in (h, w, c) order
"""
import hashlib
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np

from hqcnn import CacheFormatError, ShapeError

MAGIC = b"QVC1"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII32s")
_RECORD_HEAD = struct.Struct("<BH")


class CacheRecord(NamedTuple):
    label: int
    image_id: str
    values: np.ndarray


@dataclass(frozen=True)
class CacheHeader:
    version: int
    count: int
    height: int
    width: int
    channels: int
    digest: bytes


def encode_cache(records: Sequence[CacheRecord], shape: Tuple[int, int, int], digest: bytes) -> bytes:
    if len(digest) != 32:
        raise CacheFormatError(f"config digest must be 32 bytes, got {len(digest)}")
    chunks = [_HEADER.pack(MAGIC, VERSION, len(records), *shape, digest)]
    for record in records:
        values = np.asarray(record.values)
        if values.shape != tuple(shape):
            raise ShapeError(f"record {record.image_id!r} has shape {values.shape}, cache holds {tuple(shape)}")
        if not 0 <= record.label <= 255:
            raise CacheFormatError(f"label {record.label} does not fit in u8")
        image_id = record.image_id.encode("utf-8")
        if len(image_id) > 0xFFFF:
            raise CacheFormatError(f"image id of {len(image_id)} bytes does not fit in u16")
        chunks.append(_RECORD_HEAD.pack(record.label, len(image_id)))
        chunks.append(image_id)
        chunks.append(values.astype("<f4").tobytes(order="C"))
    return b"".join(chunks)


def decode_cache(blob: bytes) -> Tuple[CacheHeader, List[CacheRecord]]:
    if len(blob) < _HEADER.size:
        raise CacheFormatError(f"cache truncated: {len(blob)} bytes is shorter than the header")
    magic, version, count, height, width, channels, digest = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CacheFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CacheFormatError(f"unsupported cache version {version}, this reader handles {VERSION}")
    header = CacheHeader(version, count, height, width, channels, digest)
    n_values = height * width * channels
    offset = _HEADER.size
    records = []
    for index in range(count):
        if offset + _RECORD_HEAD.size > len(blob):
            raise CacheFormatError(f"cache truncated in the header of record {index}")
        label, id_len = _RECORD_HEAD.unpack_from(blob, offset)
        offset += _RECORD_HEAD.size
        end = offset + id_len + 4 * n_values
        if end > len(blob):
            raise CacheFormatError(f"cache truncated in record {index}")
        image_id = blob[offset:offset + id_len].decode("utf-8")
        offset += id_len
        values = np.frombuffer(blob, dtype="<f4", count=n_values, offset=offset).reshape(height, width, channels).copy()
        offset = end
        records.append(CacheRecord(label, image_id, values))
    if offset != len(blob):
        raise CacheFormatError(f"{len(blob) - offset} trailing bytes after {count} records")
    return header, records


def atomic_write(path, payload: bytes):
    """Writes ``payload`` to a temp file next to ``path`` and renames it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def write_cache(path, records: Sequence[CacheRecord], shape: Tuple[int, int, int], digest: bytes) -> str:
    """Writes a QVC1 file atomically and returns its SHA-256 checksum."""
    payload = encode_cache(records, shape, digest)
    atomic_write(path, payload)
    return hashlib.sha256(payload).hexdigest()


def read_cache(path) -> Tuple[CacheHeader, List[CacheRecord]]:
    return decode_cache(Path(path).read_bytes())


def checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
