"""Binary checkpoint codec.

Layout (all integers little-endian):

    magic   4 bytes  ``C2SD``
    version u32      currently 1
    count   u32      number of tensors
    per tensor:
        name_len u32, name UTF-8 bytes
        rank     u32
        dims     rank x u64
        values   product(dims) x float64

Tensors are written sorted by name, which makes the byte stream a pure
function of the state dict. The tensor naming scheme is documented in the
README (stem.*, prompt.logits, backbone.enc{d}/dec{d}.*, projector.*,
plus batch-norm running buffers and the meta.* scalars).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"C2SD"
VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        # note: ascontiguousarray would promote 0-d scalars to 1-d
        arr = np.asarray(tensors[name], dtype=np.float64, order="C")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        parts.append(arr.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != MAGIC:
        raise DataError(f"{path}: bad checkpoint magic")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise DataError(f"{path}: truncated checkpoint")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        n_vals = 1
        for d in dims:
            n_vals *= d
        values = np.frombuffer(take(8 * n_vals), dtype="<f8").reshape(dims)
        out[name] = values.astype(np.float64)
    if pos != len(data):
        raise DataError(f"{path}: trailing bytes after last tensor")
    return out
