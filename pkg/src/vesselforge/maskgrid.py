"""Binary voxel masks: run-length codec, the VMSK file format and QA helpers.

Masks live on a fixed grid addressed by the linear index
``x + dims[0] * (y + dims[1] * z)`` (x varies fastest). Internally the
occupancy is a boolean array of shape ``dims``; flattening it in Fortran
order yields exactly that linear order.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import (
    BadMagic,
    InvalidParam,
    LengthMismatch,
    TruncatedPayload,
    UnsupportedVersion,
)

ATLAS_DIMS = (182, 205, 205)
ATLAS_SPACING = (1.0, 1.0, 1.0)

VMSK_MAGIC = b"VMSK"
VMSK_VERSION = 1
# magic, version, reserved, dims x/y/z, spacing x/y/z, run_count
_HEADER = struct.Struct("<4sHH3I3fQ")
_U32_MAX = 2**32 - 1


def _as_f32(values: Sequence[float]) -> Tuple[float, float, float]:
    # spacing is persisted as f32, so keep it f32-exact in memory too
    return tuple(float(np.float32(v)) for v in values)


@dataclass(frozen=True, eq=False)
class VoxelMask:
    """Immutable 3D binary occupancy grid.

    Parameters
    ----------
    voxels : ndarray of bool, shape ``dims``
        Occupancy indexed as ``voxels[x, y, z]``.
    spacing : 3-tuple of float
        Voxel size in mm along x, y, z. Rounded to single precision.
    """

    voxels: np.ndarray
    spacing: Tuple[float, float, float] = ATLAS_SPACING

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.ndim != 3 or min(vox.shape) < 1:
            raise InvalidParam(f"mask must be 3D with positive dims, got shape {vox.shape}")
        if vox.dtype != np.bool_:
            vox = vox.astype(bool)
        else:
            vox = vox.copy()
        vox.setflags(write=False)
        spacing = tuple(self.spacing)
        if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
            raise InvalidParam(f"spacing must be 3 positive reals, got {spacing}")
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing", _as_f32(spacing))

    @classmethod
    def empty(cls, dims=ATLAS_DIMS, spacing=ATLAS_SPACING) -> "VoxelMask":
        return cls(np.zeros(tuple(dims), dtype=bool), spacing)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.voxels.shape)

    @property
    def size(self) -> int:
        return int(self.voxels.size)

    @property
    def foreground_count(self) -> int:
        return int(np.count_nonzero(self.voxels))

    def linear(self) -> np.ndarray:
        """Occupancy flattened in x-fastest linear order."""
        return self.voxels.ravel(order="F")

    @classmethod
    def from_linear(cls, flat, dims, spacing=ATLAS_SPACING) -> "VoxelMask":
        flat = np.asarray(flat)
        dims = tuple(int(d) for d in dims)
        if flat.size != int(np.prod(dims)):
            raise LengthMismatch(f"{flat.size} voxels given for dims {dims}")
        return cls(flat.reshape(dims, order="F"), spacing)

    def __eq__(self, other):
        if not isinstance(other, VoxelMask):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and bool(np.array_equal(self.voxels, other.voxels))
        )

    __hash__ = None

    def __repr__(self):
        return (
            f"VoxelMask(dims={self.dims}, spacing={self.spacing}, "
            f"foreground={self.foreground_count})"
        )


@dataclass(frozen=True, eq=False)
class RlePayload:
    """Alternating run lengths, background first; only ``runs[0]`` may be 0."""

    runs: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint32))

    @property
    def total(self) -> int:
        return int(np.sum(self.runs, dtype=np.int64))

    def __eq__(self, other):
        if not isinstance(other, RlePayload):
            return NotImplemented
        return bool(np.array_equal(self.runs, other.runs))

    __hash__ = None

    def __len__(self):
        return len(self.runs)


@dataclass(frozen=True)
class MaskStats:
    foreground_count: int
    bounding_box: Optional[Tuple[Tuple[int, int, int], Tuple[int, int, int]]]
    component_count: int
    component_sizes: Tuple[int, ...]

    def to_dict(self) -> dict:
        bbox = None
        if self.bounding_box is not None:
            bbox = [list(self.bounding_box[0]), list(self.bounding_box[1])]
        return {
            "foreground_count": self.foreground_count,
            "bounding_box": bbox,
            "component_count": self.component_count,
            "component_sizes": list(self.component_sizes),
        }


# -- run-length codec -------------------------------------------------------


def rle_encode(mask: VoxelMask) -> RlePayload:
    flat = mask.linear()
    n = flat.size
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [n]))
    runs = np.diff(bounds)
    if flat[0]:
        runs = np.concatenate(([0], runs))
    return RlePayload(runs.astype(np.uint32))


def rle_decode(payload: RlePayload, dims, spacing=ATLAS_SPACING) -> VoxelMask:
    dims = tuple(int(d) for d in dims)
    runs = np.asarray(payload.runs, dtype=np.int64)
    expected = int(np.prod(dims))
    if runs.size == 0 or payload.total != expected:
        raise LengthMismatch(f"runs sum to {payload.total}, dims {dims} need {expected}")
    if np.any(runs < 0):
        raise LengthMismatch("negative run length")
    values = (np.arange(runs.size) % 2).astype(bool)
    return VoxelMask.from_linear(np.repeat(values, runs), dims, spacing)


# -- VMSK file format --------------------------------------------------------


def save_vmsk(mask: VoxelMask) -> bytes:
    runs = rle_encode(mask).runs
    header = _HEADER.pack(
        VMSK_MAGIC, VMSK_VERSION, 0, *mask.dims, *mask.spacing, len(runs)
    )
    return header + runs.astype("<u4").tobytes()


def load_vmsk(data: bytes) -> VoxelMask:
    if len(data) < 4 or data[:4] != VMSK_MAGIC:
        raise BadMagic(f"expected magic {VMSK_MAGIC!r}, got {bytes(data[:4])!r}")
    if len(data) < _HEADER.size:
        raise TruncatedPayload(f"header needs {_HEADER.size} bytes, got {len(data)}")
    _, version, _, dx, dy, dz, sx, sy, sz, count = _HEADER.unpack_from(data)
    if version != VMSK_VERSION:
        raise UnsupportedVersion(f"VMSK version {version} (supported: {VMSK_VERSION})")
    need = _HEADER.size + 4 * count
    if len(data) < need:
        raise TruncatedPayload(f"{count} runs need {need} bytes, got {len(data)}")
    if len(data) > need:
        raise LengthMismatch(f"{len(data) - need} trailing bytes after run table")
    if min(dx, dy, dz) < 1:
        raise InvalidParam(f"invalid dims {(dx, dy, dz)}")
    runs = np.frombuffer(data, dtype="<u4", count=count, offset=_HEADER.size)
    return rle_decode(RlePayload(runs.astype(np.uint32)), (dx, dy, dz), (sx, sy, sz))


def write_vmsk(path, mask: VoxelMask) -> None:
    with open(path, "wb") as fh:
        fh.write(save_vmsk(mask))


def read_vmsk(path) -> VoxelMask:
    with open(path, "rb") as fh:
        return load_vmsk(fh.read())


def from_dense_bytes(raw: bytes, dims, spacing=ATLAS_SPACING) -> VoxelMask:
    """Import a raw u8 volume of 0/1 values in x-fastest order."""
    arr = np.frombuffer(raw, dtype=np.uint8)
    if np.any(arr > 1):
        raise InvalidParam("dense volume must contain only 0 and 1")
    return VoxelMask.from_linear(arr.astype(bool), dims, spacing)


def to_dense_bytes(mask: VoxelMask) -> bytes:
    return mask.linear().astype(np.uint8).tobytes()


def compression_ratio(mask: VoxelMask) -> float:
    """Dense 1-byte-per-voxel size over encoded VMSK size."""
    return mask.size / len(save_vmsk(mask))


# -- geometry ----------------------------------------------------------------


def mirror_sagittal(mask: VoxelMask) -> VoxelMask:
    """Reflect across the mid-sagittal plane (axis 0 is left-right)."""
    return VoxelMask(mask.voxels[::-1, :, :], mask.spacing)


_STRUCTURES = {
    6: ndimage.generate_binary_structure(3, 1),
    26: ndimage.generate_binary_structure(3, 3),
}


def connected_components(mask: VoxelMask, connectivity: int = 6) -> MaskStats:
    if connectivity not in _STRUCTURES:
        raise InvalidParam(f"connectivity must be 6 or 26, got {connectivity}")
    labels, count = ndimage.label(mask.voxels, structure=_STRUCTURES[connectivity])
    sizes = np.bincount(labels.ravel(), minlength=count + 1)[1:]
    sizes = tuple(int(s) for s in sorted(sizes, reverse=True))
    fg = mask.foreground_count
    bbox = None
    if fg:
        idx = np.nonzero(mask.voxels)
        lo = tuple(int(a.min()) for a in idx)
        hi = tuple(int(a.max()) for a in idx)
        bbox = (lo, hi)
    return MaskStats(fg, bbox, int(count), sizes)


mask_stats = connected_components
