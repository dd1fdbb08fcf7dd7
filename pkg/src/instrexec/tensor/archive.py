"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic  b"IXCK"
    u32    format version
    u64    rng seed
    u32    entry count
    entries, each:
        u16 name length, UTF-8 name
        2-byte dtype tag (f8, i8, u1)
        u8  ndim, then ndim x u32 extents
        payload, little-endian, row-major
"""
from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"IXCK"
FORMAT_VERSION = 1
_TAGS = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8"), "u1": np.dtype("u1")}
MANIFEST_KEY = "__manifest__"


class ArchiveError(ValueError):
    pass


def _tag(arr):
    for tag, dt in _TAGS.items():
        if arr.dtype.kind == dt.kind and arr.dtype.itemsize == dt.itemsize:
            return tag
    if arr.dtype.kind == "f":
        return "f8"
    if arr.dtype.kind in "iub":
        return "i8"
    raise ArchiveError(f"unsupported dtype {arr.dtype}")


def dumps(entries, seed, manifest=None):
    """Serialize ``entries`` (name -> array) to bytes; ``manifest`` is stored as a JSON entry."""
    items = dict(entries)
    if manifest is not None:
        items[MANIFEST_KEY] = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype="u1")
    out = [MAGIC, struct.pack("<IQI", FORMAT_VERSION, int(seed) & (2**64 - 1), len(items))]
    for name, arr in items.items():
        arr = np.asarray(arr)
        tag = _tag(arr)
        arr = np.ascontiguousarray(arr, dtype=_TAGS[tag])
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw + tag.encode("ascii"))
        out.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def loads(blob):
    """Inverse of :func:`dumps`; returns ``(entries, seed, manifest)``."""
    if blob[:4] != MAGIC:
        raise ArchiveError("not a checkpoint archive")
    version, seed, count = struct.unpack_from("<IQI", blob, 4)
    if version != FORMAT_VERSION:
        raise ArchiveError(f"unsupported format version {version}")
    pos = 4 + struct.calcsize("<IQI")
    entries = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        tag = blob[pos:pos + 2].decode("ascii")
        pos += 2
        if tag not in _TAGS:
            raise ArchiveError(f"unknown dtype tag {tag!r}")
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        dt = _TAGS[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        entries[name] = np.frombuffer(blob[pos:pos + nbytes], dtype=dt).reshape(shape).copy()
        pos += nbytes
    manifest = None
    if MANIFEST_KEY in entries:
        manifest = json.loads(entries.pop(MANIFEST_KEY).tobytes().decode())
    return entries, seed, manifest


def save(path, entries, seed, manifest=None):
    with open(path, "wb") as fh:
        fh.write(dumps(entries, seed, manifest))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
