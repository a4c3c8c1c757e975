"""Dense float64 tensors backed by numpy, plus the BLTN binary dump format.

Feature maps are laid out (channels, height, width) and flattened
channel-major, so a flat unit index ``u`` always maps to the same
``(c, h, w)`` triple.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import NonFiniteValue, ShapeMismatch, ValidationError, ZeroNorm

MAGIC = b"BLTN"
VERSION = 1
DTYPE_F64 = 0
ZERO_NORM_TOL = 1e-12


def as_tensor(values, shape=None) -> np.ndarray:
    """Return a C-contiguous float64 copy of ``values``, checking finiteness."""
    arr = np.array(values, dtype=np.float64, order="C")
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeMismatch(f"extents must be positive, got {shape}")
        if int(np.prod(shape)) != arr.size:
            raise ShapeMismatch(f"cannot view {arr.size} values as {shape}")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue("tensor contains NaN or Inf")
    return arr


def _flat_pair(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ShapeMismatch(f"length {a.size} vs {b.size}")
    return a, b


def dot(a, b) -> float:
    a, b = _flat_pair(a, b)
    return float(np.dot(a, b))


def cosine(a, b) -> float:
    a, b = _flat_pair(a, b)
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < ZERO_NORM_TOL or nb < ZERO_NORM_TOL:
        raise ZeroNorm(f"norms {na:.3g}, {nb:.3g}")
    # Scale each side first so the result does not depend on magnitudes.
    c = float(np.dot(a / na, b / nb))
    return min(1.0, max(-1.0, c))


def hadamard(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape {a.shape} vs {b.shape}")
    return a * b


# -- BLTN dumps ---------------------------------------------------------------


def write_tensor(fh: BinaryIO, tensor) -> int:
    """Write one BLTN record to ``fh``; returns the number of bytes written."""
    arr = as_tensor(tensor)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    header = MAGIC + struct.pack("<IBI", VERSION, DTYPE_F64, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.astype("<f8", copy=False).tobytes(order="C")
    fh.write(header)
    fh.write(payload)
    return len(header) + len(payload)


def read_tensor(fh: BinaryIO) -> np.ndarray:
    head = fh.read(4 + 4 + 1 + 4)
    if len(head) < 13 or head[:4] != MAGIC:
        raise ValidationError("not a BLTN record")
    version, dtype, rank = struct.unpack("<IBI", head[4:])
    if version != VERSION:
        raise ValidationError(f"unsupported BLTN version {version}")
    if dtype != DTYPE_F64:
        raise ValidationError(f"unsupported BLTN dtype code {dtype}")
    extents = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    count = int(np.prod(extents)) if rank else 1
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise ValidationError("truncated BLTN payload")
    arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(extents)
    return arr


def tensor_to_bytes(tensor) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, tensor)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(data))


def save_tensor(path, tensor) -> None:
    from ._io import atomic_write_bytes

    atomic_write_bytes(Path(path), tensor_to_bytes(tensor))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)
