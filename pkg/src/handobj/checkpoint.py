"""Binary checkpoint format for named parameter arrays.

Layout (all integers little-endian):

    magic   8 bytes  b"HOCKPT01"
    count   uint32
    manifest, repeated ``count`` times:
        name_len  uint16, then UTF-8 name bytes
        ndim      uint8
        extents   ndim x uint32
        offset    uint64   byte offset into the data section
    data    concatenated float64 little-endian values, C order

The manifest carries explicit offsets so readers in any language can seek
directly to a parameter without decoding the others.
"""

import struct

import numpy as np

from .errors import ParseError

MAGIC = b"HOCKPT01"


def save_checkpoint(path, params):
    """Write a name -> float64 array mapping. Order is sorted by name."""
    names = sorted(params)
    manifest = bytearray()
    blobs = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        nb = name.encode("utf-8")
        manifest += struct.pack("<H", len(nb)) + nb
        manifest += struct.pack("<B", arr.ndim)
        manifest += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
        manifest += struct.pack("<Q", offset)
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(names)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Read a checkpoint back into a name -> float64 array dict."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise ParseError(f"{path}: not a checkpoint file (bad magic)")
    (count,) = struct.unpack_from("<I", raw, 8)
    pos = 12
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos) if ndim else ()
        pos += 4 * ndim
        (offset,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        entries.append((name, shape, offset))
    data_start = pos
    out = {}
    for name, shape, offset in entries:
        n = int(np.prod(shape)) if shape else 1
        start = data_start + offset
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=start)
        out[name] = arr.reshape(shape).astype(np.float64)
    return out
