"""Dense tensor value type and the primitive shape operations.

Everything downstream (kernels, models, datasets, checkpoints) works on
C-contiguous float64 numpy arrays validated by this module. Arrays returned
by the public functions are frozen (non-writeable), so they behave as
immutable values and can be shared between threads.

Binary tensor record (used by dataset and checkpoint files): magic ``V4DT``,
u8 rank, rank x u32 little-endian extents, product(extents) x f64
little-endian payload.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence

import numpy as np

MAX_RANK = 6
TENSOR_MAGIC = b"V4DT"


class TensorError(ValueError):
    """A tensor operation violated its contract."""


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(e) for e in shape)
    if not 1 <= len(shape) <= MAX_RANK:
        raise TensorError(f"rank must be in 1..{MAX_RANK}, got {len(shape)}")
    if any(e < 1 for e in shape):
        raise TensorError(f"zero or negative extent in shape {shape}")
    return shape


def tensor_create(shape: Sequence[int], data) -> np.ndarray:
    """Build a frozen float64 tensor from a flat row-major data sequence."""
    shape = _check_shape(shape)
    flat = np.asarray(data, dtype=np.float64).reshape(-1)
    n = int(np.prod(shape))
    if flat.size != n:
        raise TensorError(
            f"length mismatch: shape {shape} needs {n} values, got {flat.size}"
        )
    if not np.all(np.isfinite(flat)):
        raise TensorError("non-finite values in tensor data")
    out = flat.copy().reshape(shape)
    out.setflags(write=False)
    return out


def freeze(arr: np.ndarray) -> np.ndarray:
    """Return a frozen C-contiguous float64 view/copy of ``arr``."""
    out = np.ascontiguousarray(arr, dtype=np.float64)
    if out is arr and arr.flags.writeable:
        out = arr.copy()
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class PadSpec:
    """Per-axis (before, after) pad amounts plus a fill value."""

    amounts: tuple[tuple[int, int], ...]
    fill: float = 0.0

    def __post_init__(self):
        amts = tuple((int(b), int(a)) for b, a in self.amounts)
        if any(b < 0 or a < 0 for b, a in amts):
            raise TensorError(f"negative pad amount in {amts}")
        object.__setattr__(self, "amounts", amts)


def pad(t: np.ndarray, p: PadSpec) -> np.ndarray:
    """Pad ``t`` per axis with ``p.fill``; interior values are preserved."""
    if len(p.amounts) != t.ndim:
        raise TensorError(
            f"pad rank mismatch: tensor rank {t.ndim}, pad spec rank {len(p.amounts)}"
        )
    out = np.pad(t, p.amounts, mode="constant", constant_values=p.fill)
    out.setflags(write=False)
    return out


def slice_axis(t: np.ndarray, axis: int, start: int, length: int) -> np.ndarray:
    """Contiguous sub-tensor of ``length`` entries along one axis."""
    if not 0 <= axis < t.ndim:
        raise TensorError(f"axis {axis} out of range for rank {t.ndim}")
    if length < 1:
        raise TensorError(f"slice length must be >= 1, got {length}")
    if start < 0 or start + length > t.shape[axis]:
        raise TensorError(
            f"slice [{start}, {start + length}) out of range for extent {t.shape[axis]}"
        )
    index = [slice(None)] * t.ndim
    index[axis] = slice(start, start + length)
    out = np.ascontiguousarray(t[tuple(index)])
    out.setflags(write=False)
    return out


def write_tensor(f: BinaryIO, t: np.ndarray) -> None:
    """Append one binary tensor record to a stream."""
    shape = _check_shape(t.shape)
    arr = np.ascontiguousarray(t, dtype=np.float64)
    f.write(TENSOR_MAGIC)
    f.write(struct.pack("<B", len(shape)))
    f.write(struct.pack(f"<{len(shape)}I", *shape))
    f.write(arr.astype("<f8", copy=False).tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    """Read one binary tensor record written by :func:`write_tensor`."""
    magic = f.read(4)
    if magic != TENSOR_MAGIC:
        raise TensorError(f"bad tensor magic {magic!r}, expected {TENSOR_MAGIC!r}")
    (rank,) = struct.unpack("<B", f.read(1))
    if not 1 <= rank <= MAX_RANK:
        raise TensorError(f"bad tensor rank {rank}")
    shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
    n = int(np.prod(shape))
    payload = f.read(8 * n)
    if len(payload) != 8 * n:
        raise TensorError("truncated tensor payload")
    arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    arr.setflags(write=False)
    return arr
