"""Random elastic deformation of binary masks.

A coarse lattice of random control displacements is blended into a dense
per-voxel field with tensor-product cubic B-splines, and masks are
inverse-warped through that field.

Control lattice layout: ``anchors_per_axis`` random interior controls plus a
border control on each side that is pinned to zero, giving
``anchors_per_axis + 2`` controls per axis spread evenly from voxel 0 to
voxel ``dim - 1``. Controls beyond the lattice count as zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .errors import DimsMismatch, InvalidParam
from .maskgrid import VoxelMask

DEFAULT_ANCHORS = (4, 5)
DEFAULT_MAX_DISP = 90.0

_SEED_MASK = (1 << 64) - 1


@dataclass(frozen=True, eq=False)
class ControlGrid:
    anchors_per_axis: int
    displacements: np.ndarray  # (n+2, n+2, n+2, 3), voxels
    max_disp: float
    seed: int

    @property
    def shape(self):
        return self.displacements.shape[:3]


@dataclass(frozen=True, eq=False)
class DisplacementField:
    vectors: np.ndarray  # (X, Y, Z, 3) float64, voxels

    @property
    def dims(self):
        return tuple(int(d) for d in self.vectors.shape[:3])

    def max_abs(self) -> np.ndarray:
        """Largest absolute displacement per component."""
        return np.abs(self.vectors).reshape(-1, 3).max(axis=0)


def sample_control_grid(rng_seed: int, anchors_per_axis: int, max_disp: float) -> ControlGrid:
    """Draw interior control displacements i.i.d. uniform on ``[-max_disp, max_disp]``."""
    if int(anchors_per_axis) != anchors_per_axis or anchors_per_axis < 2:
        raise InvalidParam(f"anchors_per_axis must be an integer >= 2, got {anchors_per_axis}")
    if not np.isfinite(max_disp) or max_disp < 0:
        raise InvalidParam(f"max_disp must be >= 0, got {max_disp}")
    n = int(anchors_per_axis)
    rng = np.random.default_rng(int(rng_seed) & _SEED_MASK)
    disp = np.zeros((n + 2, n + 2, n + 2, 3))
    disp[1:-1, 1:-1, 1:-1] = rng.uniform(-max_disp, max_disp, size=(n, n, n, 3))
    disp.setflags(write=False)
    return ControlGrid(n, disp, float(max_disp), int(rng_seed))


def control_coordinate(dim: int, n_controls: int) -> np.ndarray:
    """Continuous control-lattice coordinate of every voxel along one axis."""
    if dim == 1:
        return np.zeros(1)
    return np.arange(dim, dtype=np.float64) * (n_controls - 1) / (dim - 1)


def _axis_weights(dim: int, n_controls: int):
    u = control_coordinate(dim, n_controls)
    base = np.floor(u)
    t = u - base
    t2 = t * t
    t3 = t2 * t
    w = np.empty((dim, 4))
    w[:, 0] = (1.0 - t) ** 3 / 6.0
    w[:, 1] = (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0
    w[:, 2] = (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0
    w[:, 3] = t3 / 6.0
    return base.astype(np.int64) - 1, w


@numba.njit(cache=True)
def _blend_axis0(c, idx, w):
    # out[x, ...] = sum_a w[x, a] * c[idx[x] + a, ...], out-of-range controls are zero
    n = c.shape[0]
    out = np.zeros((idx.shape[0],) + c.shape[1:])
    for x in range(idx.shape[0]):
        for a in range(4):
            k = idx[x] + a
            if k < 0 or k >= n:
                continue
            out[x] += w[x, a] * c[k]
    return out


@numba.njit(cache=True)
def _blend_last(t2, idx, w, out):
    # t2: (X, Y, nz, 3) -> out: (X, Y, Z, 3)
    X, Y, nz = t2.shape[0], t2.shape[1], t2.shape[2]
    Z = idx.shape[0]
    for x in range(X):
        for y in range(Y):
            for z in range(Z):
                v0 = 0.0
                v1 = 0.0
                v2 = 0.0
                for a in range(4):
                    k = idx[z] + a
                    if k < 0 or k >= nz:
                        continue
                    wk = w[z, a]
                    v0 += wk * t2[x, y, k, 0]
                    v1 += wk * t2[x, y, k, 1]
                    v2 += wk * t2[x, y, k, 2]
                out[x, y, z, 0] = v0
                out[x, y, z, 1] = v1
                out[x, y, z, 2] = v2


def densify_field(grid: ControlGrid, dims) -> DisplacementField:
    """Dense cubic B-spline interpolation of the control displacements."""
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise InvalidParam(f"dims must be 3 positive integers, got {dims}")
    c = np.ascontiguousarray(grid.displacements, dtype=np.float64)
    nx, ny, nz = c.shape[:3]
    ix, wx = _axis_weights(dims[0], nx)
    iy, wy = _axis_weights(dims[1], ny)
    iz, wz = _axis_weights(dims[2], nz)
    t1 = _blend_axis0(c, ix, wx)  # (X, ny, nz, 3)
    t2 = _blend_axis0(np.ascontiguousarray(t1.transpose(1, 0, 2, 3)), iy, wy)  # (Y, X, nz, 3)
    t2 = np.ascontiguousarray(t2.transpose(1, 0, 2, 3))
    out = np.empty(dims + (3,))
    _blend_last(t2, iz, wz, out)
    return DisplacementField(out)


@numba.njit(cache=True)
def _warp_linear(src, f, out):
    X, Y, Z = src.shape
    for x in range(X):
        for y in range(Y):
            for z in range(Z):
                px = x + f[x, y, z, 0]
                py = y + f[x, y, z, 1]
                pz = z + f[x, y, z, 2]
                x0 = int(np.floor(px))
                y0 = int(np.floor(py))
                z0 = int(np.floor(pz))
                if x0 < -1 or y0 < -1 or z0 < -1 or x0 >= X or y0 >= Y or z0 >= Z:
                    continue
                tx = px - x0
                ty = py - y0
                tz = pz - z0
                acc = 0.0
                for dx in range(2):
                    xi = x0 + dx
                    if xi < 0 or xi >= X:
                        continue
                    wx = tx if dx else 1.0 - tx
                    for dy in range(2):
                        yi = y0 + dy
                        if yi < 0 or yi >= Y:
                            continue
                        wxy = wx * (ty if dy else 1.0 - ty)
                        for dz in range(2):
                            zi = z0 + dz
                            if zi < 0 or zi >= Z:
                                continue
                            if src[xi, yi, zi]:
                                acc += wxy * (tz if dz else 1.0 - tz)
                out[x, y, z] = acc >= 0.5


@numba.njit(cache=True)
def _warp_nearest(src, f, out):
    X, Y, Z = src.shape
    for x in range(X):
        for y in range(Y):
            for z in range(Z):
                xi = int(np.floor(x + f[x, y, z, 0] + 0.5))
                yi = int(np.floor(y + f[x, y, z, 1] + 0.5))
                zi = int(np.floor(z + f[x, y, z, 2] + 0.5))
                if 0 <= xi < X and 0 <= yi < Y and 0 <= zi < Z:
                    out[x, y, z] = src[xi, yi, zi]


def warp_mask(mask: VoxelMask, field: DisplacementField, interpolation: str = "linear") -> VoxelMask:
    """Inverse-warp: output voxel ``v`` samples the input at ``v + field(v)``.

    With ``interpolation="linear"`` the {0,1} occupancy is trilinearly
    interpolated and thresholded at 0.5; ``"nearest"`` picks the closest
    voxel. Samples outside the volume read as background.
    """
    if field.dims != mask.dims:
        raise DimsMismatch(f"field dims {field.dims} != mask dims {mask.dims}")
    vec = np.ascontiguousarray(field.vectors, dtype=np.float64)
    src = np.ascontiguousarray(mask.voxels)
    out = np.zeros(mask.dims, dtype=np.bool_)
    if interpolation == "linear":
        _warp_linear(src, vec, out)
    elif interpolation == "nearest":
        _warp_nearest(src, vec, out)
    else:
        raise InvalidParam(f"unknown interpolation {interpolation!r}")
    return VoxelMask(out, mask.spacing)


def random_deform(
    mask: VoxelMask,
    seed: int,
    anchors_per_axis: int = 4,
    max_disp: float = DEFAULT_MAX_DISP,
    interpolation: str = "linear",
) -> VoxelMask:
    grid = sample_control_grid(seed, anchors_per_axis, max_disp)
    return warp_mask(mask, densify_field(grid, mask.dims), interpolation)
