"""Shared containers, validation helpers and the STF1 tensor format.

STF1 layout (all little-endian)::

    b"STF1" | u32 rank | rank x u32 dims | prod(dims) x f32 payload

Dims are written in numpy (C-order) shape order, so a volume of D slices of
HxW pixels is stored as ``(D, H, W)``.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"STF1"
_HEADER = struct.Struct("<4sI")


class TensorFormatError(ValueError):
    """Base class for malformed STF1 files."""


class BadMagicError(TensorFormatError):
    pass


class PayloadMismatchError(TensorFormatError):
    """Header dims disagree with the number of payload bytes."""


def write_tensor(path: str | os.PathLike, tensor: np.ndarray) -> None:
    arr = np.asarray(tensor)
    if arr.ndim == 0:
        raise ValueError("scalars are not tensors; reshape to (1,) first")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"refusing to write non-finite values to {path}")
    header = _HEADER.pack(MAGIC, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size or blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: missing STF1 magic (got {blob[:4]!r})")
    (_, rank) = _HEADER.unpack_from(blob, 0)
    dims_end = _HEADER.size + 4 * rank
    if len(blob) < dims_end:
        raise PayloadMismatchError(f"{path}: truncated header for rank {rank}")
    dims = struct.unpack_from(f"<{rank}I", blob, _HEADER.size)
    expected = 4 * int(np.prod(dims, dtype=np.int64))
    if len(blob) - dims_end != expected:
        raise PayloadMismatchError(
            f"{path}: dims {dims} need {expected} payload bytes, found {len(blob) - dims_end}"
        )
    return np.frombuffer(blob, dtype="<f4", offset=dims_end).reshape(dims).astype(np.float32)


def stack_25d(volume: np.ndarray, slice_index: int) -> np.ndarray:
    """Return slices (i-1, i, i+1) as a (3, H, W) stack.

    Missing neighbours at the volume ends are replaced by slice i itself.
    """
    volume = np.asarray(volume)
    if volume.ndim != 3 or volume.shape[0] < 1:
        raise ValueError(f"expected a (D, H, W) volume with D >= 1, got shape {volume.shape}")
    depth = volume.shape[0]
    if not 0 <= slice_index < depth:
        raise IndexError(f"slice index {slice_index} out of range for {depth} slices")
    lo = slice_index - 1 if slice_index > 0 else slice_index
    hi = slice_index + 1 if slice_index < depth - 1 else slice_index
    return np.stack([volume[lo], volume[slice_index], volume[hi]])


def stack_volume_25d(volume: np.ndarray) -> np.ndarray:
    """All 2.5D stacks of a volume as an (D, 3, H, W) array."""
    return np.stack([stack_25d(volume, i) for i in range(volume.shape[0])])


def check_same_shape(*arrays: np.ndarray) -> None:
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def as_soft_mask(values: Any) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if not np.all((arr >= 0.0) & (arr <= 1.0)):
        raise ValueError("soft mask values must lie in [0, 1]")
    return arr


def as_binary_mask(values: Any) -> np.ndarray:
    arr = np.asarray(values)
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError("binary mask values must be exactly 0 or 1")
    return arr.astype(np.uint8)


@dataclass(frozen=True)
class Volume:
    """A stack of slices with its ground truth and bone masks, all (D, H, W)."""

    id: str
    intensity: np.ndarray
    gt: np.ndarray
    bone: np.ndarray
    lesions: tuple = field(default=(), compare=False)

    def __post_init__(self):
        check_same_shape(self.intensity, self.gt, self.bone)
        if self.intensity.ndim != 3:
            raise ValueError("volumes are (D, H, W)")

    @property
    def depth(self) -> int:
        return self.intensity.shape[0]


@dataclass(frozen=True)
class SampleRecord:
    volume_id: str
    slice_index: int
    inputs: np.ndarray  # (3, H, W)
    soft_label: np.ndarray | None
    gt_label: np.ndarray | None
    bone: np.ndarray

    def __post_init__(self):
        planes = [p for p in (self.soft_label, self.gt_label, self.bone) if p is not None]
        if self.inputs.shape[0] != 3:
            raise ValueError("input stack must have 3 planes")
        check_same_shape(self.inputs[0], *planes)


def dump_json(path: str | os.PathLike, payload: Any) -> None:
    """Write JSON deterministically (sorted keys, LF, trailing newline)."""
    text = json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    Path(path).write_bytes(text.encode("utf-8"))


def load_json(path: str | os.PathLike) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))
