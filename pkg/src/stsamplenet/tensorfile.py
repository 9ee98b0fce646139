"""Binary named-tensor container used for checkpoints and feature archives.

Layout (little-endian)::

    b"STSN" | version u32 | entry count u32
    per entry: name length u16 | UTF-8 name | dtype tag u8 | rank u8 | dims u32 * rank | payload

dtype tag 1 is float32, tag 2 is uint8 (used for embedded text blobs).
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"STSN"
VERSION = 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("u1")}
TAGS = {v: k for k, v in DTYPES.items()}


class FormatError(ValueError):
    pass


def encode(entries: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        dtype = DTYPES[2] if arr.dtype == np.uint8 else DTYPES[1]
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<BB", TAGS[dtype], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    return b"".join(out)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    try:
        return _decode(blob)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"corrupt tensor file: {exc}") from None


def _decode(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise FormatError("bad magic; not an STSN tensor file")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    pos = 12
    entries = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        tag, rank = struct.unpack_from("<BB", blob, pos)
        pos += 2
        if tag not in DTYPES:
            raise FormatError(f"{name}: unknown dtype tag {tag}")
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        dtype = DTYPES[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        entries[name] = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize,
                                      offset=pos).reshape(dims).copy()
        pos += nbytes
    if pos != len(blob):
        raise FormatError("trailing bytes after last entry")
    return entries


def save(path, entries: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(entries))


def load(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def text_blob(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def blob_text(arr: np.ndarray) -> str:
    return arr.astype(np.uint8).tobytes().decode("utf-8")
