"""Binary checkpoint of named float64 tensors.

Layout (little-endian): magic "M2RN", version u32, tensor count u32, then per
tensor: name length u16, utf-8 name, rank u8, dims u32 each, raw float64
payload. Save/load round-trips are bit-identical.
"""

import struct

import numpy as np

MAGIC = b"M2RN"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


def save_checkpoint(path, tensors):
    """Write an ordered name->array mapping."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise CheckpointError(f"tensor name too long: {name!r}")
            if arr.ndim > 0xFF:
                raise CheckpointError(f"tensor rank too large: {arr.ndim}")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.tobytes())


def _read_exact(fh, n):
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def load_checkpoint(path):
    """Read back a name->array dict in file order."""
    tensors = {}
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise CheckpointError("bad magic; not a checkpoint file")
        version = struct.unpack("<I", _read_exact(fh, 4))[0]
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        count = struct.unpack("<I", _read_exact(fh, 4))[0]
        for _ in range(count):
            name_len = struct.unpack("<H", _read_exact(fh, 2))[0]
            name = _read_exact(fh, name_len).decode("utf-8")
            rank = struct.unpack("<B", _read_exact(fh, 1))[0]
            shape = tuple(struct.unpack("<I", _read_exact(fh, 4))[0]
                          for _ in range(rank))
            n_items = int(np.prod(shape, dtype=np.int64)) if shape else 1
            payload = _read_exact(fh, 8 * n_items)
            tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    return tensors
