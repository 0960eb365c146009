"""Binary parameter blob: little-endian fp32 arrays keyed by "node_id/name".

Layout: magic 'SFPB', version, entry count, then an id table of
(key, byte offset, shape) records, then the concatenated array data.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"SFPB"
VERSION = 1


class BlobError(ValueError):
    pass


def save_blob(arrays: dict, path) -> None:
    """arrays: flat dict mapping 'node_id/name' -> ndarray (cast to fp32)."""
    header = bytearray()
    data = bytearray()
    header += MAGIC + struct.pack("<II", VERSION, len(arrays))
    offset = 0
    payloads = []
    for key in sorted(arrays):
        arr = np.ascontiguousarray(arrays[key], dtype="<f4")
        kb = key.encode("utf-8")
        header += struct.pack("<I", len(kb)) + kb
        header += struct.pack("<QI", offset, arr.ndim)
        header += struct.pack(f"<{arr.ndim}I", *arr.shape)
        payloads.append(arr.tobytes())
        offset += arr.nbytes
    with open(path, "wb") as f:
        f.write(bytes(header))
        for p in payloads:
            f.write(p)


def load_blob(path) -> dict:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise BlobError(f"{path}: bad magic {raw[:4]!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise BlobError(f"{path}: unsupported version {version}")
    pos = 12
    entries = []
    for _ in range(count):
        (klen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        key = raw[pos:pos + klen].decode("utf-8")
        pos += klen
        offset, ndim = struct.unpack_from("<QI", raw, pos)
        pos += 12
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        entries.append((key, offset, shape))
    base = pos
    out = {}
    for key, offset, shape in entries:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=base + offset)
        out[key] = arr.reshape(shape).copy()
    return out


def flatten_params(params: dict) -> dict:
    """Nested {node_id: {name: array}} -> flat {'node_id/name': array}."""
    return {f"{nid}/{name}": arr for nid, group in params.items()
            for name, arr in group.items()}


def unflatten_params(flat: dict) -> dict:
    nested = {}
    for key, arr in flat.items():
        nid, _, name = key.rpartition("/")
        nested.setdefault(nid, {})[name] = arr
    return nested
