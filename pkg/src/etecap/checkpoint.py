"""Binary checkpoint container: named float64 tensors plus a JSON header.

Byte layout (little-endian, stable across versions):

    magic "ETEC" | u32 version=1 | u32 header_len | header JSON (UTF-8)
    u32 n_tensors
    per tensor, sorted by name:
        u16 name_len | name UTF-8 | u8 ndim | u32 x ndim extents
        float64 values, row-major

The header carries the resolved run config, the vocabulary token list and
the stage tag, so a checkpoint is self-describing.  Writing is fully
deterministic (sorted keys, sorted tensor names).
"""

import json
import struct

import numpy as np

from .errors import IngestionError

MAGIC = b"ETEC"
VERSION = 1


def save_checkpoint(path, named_tensors, header):
    header_blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header_blob)))
        fh.write(header_blob)
        fh.write(struct.pack("<I", len(named_tensors)))
        for name in sorted(named_tensors):
            raw = named_tensors[name]
            # np.ascontiguousarray would promote 0-d arrays to 1-d
            data = np.asarray(raw.data if hasattr(raw, "data") else raw,
                              dtype="<f8", order="C")
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes(order="C"))


def load_checkpoint(path):
    """Return (header dict, {name: float64 ndarray})."""
    try:
        blob = open(path, "rb").read()
    except OSError as exc:
        raise IngestionError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:4] != MAGIC:
        raise IngestionError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    version, header_len = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise IngestionError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    header = json.loads(blob[pos:pos + header_len].decode("utf-8"))
    pos += header_len
    (n_tensors,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    tensors = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(blob, dtype="<f8", count=count, offset=pos)
        pos += 8 * count
        tensors[name] = values.reshape(shape).astype(np.float64)
    return header, tensors
