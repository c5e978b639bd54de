"""Resampling kernels: trilinear sampling, centred affine warps, cubic
B-spline upsampling of control grids and dense displacement warps.

All warps pull from the input (output voxel -> input coordinate). Every
sample whose coordinate leaves ``[0, n-1]`` on any axis is 0. Arithmetic
is float64; results are stored as float32.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .volume import Volume3

FILL = 0.0


class SingularMatrix(ValueError):
    pass


class GridTooSmall(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Affine4:
    """Row-major 4x4 homogeneous map from output to input voxel coordinates."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"Affine4 needs a 4x4 matrix, got {m.shape}")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("Affine4 bottom row must be (0, 0, 0, 1)")
        if np.linalg.det(m[:3, :3]) == 0.0:
            raise SingularMatrix("affine matrix is not invertible")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Affine4":
        return cls(np.eye(4))

    @classmethod
    def from_linear(cls, linear, translation=(0.0, 0.0, 0.0)) -> "Affine4":
        m = np.eye(4)
        m[:3, :3] = linear
        m[:3, 3] = translation
        return cls(m)


@dataclass(frozen=True)
class DisplacementField:
    """Per-voxel displacement in voxels, array of shape ``(nx, ny, nz, 3)``."""

    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 4 or v.shape[3] != 3:
            raise ValueError(f"displacement field must be (nx, ny, nz, 3), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("displacement field must be finite")
        object.__setattr__(self, "vectors", v)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.vectors.shape[:3])

    @classmethod
    def zeros(cls, shape) -> "DisplacementField":
        return cls(np.zeros(tuple(shape) + (3,)))


@dataclass(frozen=True)
class ControlGrid:
    """Coarse grid of displacement vectors, array of shape ``(gx, gy, gz, 3)``."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 4 or v.shape[3] != 3:
            raise ValueError(f"control grid must be (gx, gy, gz, 3), got {v.shape}")
        if min(v.shape[:3]) < 2:
            raise GridTooSmall(f"control grid needs at least 2 points per axis, got {v.shape[:3]}")
        object.__setattr__(self, "values", v)

    @property
    def grid_shape(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.values.shape[:3])


def _sample(data: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Trilinear samples of ``data`` at ``coords`` (..., 3); float64 result."""
    data = np.asarray(data, dtype=np.float64)
    shape = np.array(data.shape)
    lead = coords.shape[:-1]
    pts = coords.reshape(-1, 3)
    out = np.zeros(pts.shape[0], dtype=np.float64)

    inside = np.all((pts >= 0.0) & (pts <= shape - 1), axis=1)
    p = pts[inside]
    # lower corner clamped to n-2 so the upper edge uses weight 1 on the last node
    base = np.floor(p).astype(np.int64)
    base = np.minimum(base, np.maximum(shape - 2, 0))
    frac = p - base

    idx = [base[:, a] for a in range(3)]
    nxt = [np.minimum(base[:, a] + 1, shape[a] - 1) for a in range(3)]
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz

    acc = data[idx[0], idx[1], idx[2]] * (gx * gy * gz)
    acc += data[nxt[0], idx[1], idx[2]] * (fx * gy * gz)
    acc += data[idx[0], nxt[1], idx[2]] * (gx * fy * gz)
    acc += data[idx[0], idx[1], nxt[2]] * (gx * gy * fz)
    acc += data[nxt[0], nxt[1], idx[2]] * (fx * fy * gz)
    acc += data[nxt[0], idx[1], nxt[2]] * (fx * gy * fz)
    acc += data[idx[0], nxt[1], nxt[2]] * (gx * fy * fz)
    acc += data[nxt[0], nxt[1], nxt[2]] * (fx * fy * fz)
    out[inside] = acc
    return out.reshape(lead)


def trilinear_sample(vol: Volume3, p: Sequence[float]) -> float:
    """Interpolate ``vol`` at continuous voxel coordinate ``p``; 0 outside."""
    return float(_sample(vol.data, np.asarray(p, dtype=np.float64).reshape(1, 3))[0])


def sample_points(vol: Volume3, points) -> np.ndarray:
    """Vectorised :func:`trilinear_sample` over an ``(..., 3)`` array."""
    return _sample(vol.data, np.asarray(points, dtype=np.float64))


def voxel_grid(shape) -> np.ndarray:
    """Integer voxel coordinates as a float64 array of shape ``shape + (3,)``."""
    axes = [np.arange(n, dtype=np.float64) for n in shape]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def volume_center(shape) -> np.ndarray:
    return (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0


def warp_affine(vol: Volume3, m: Affine4) -> Volume3:
    """Resample ``vol`` through ``m`` anchored at the volume centre.

    ``out[p] = sample(vol, M (p - c) + c)`` with ``c = (n - 1) / 2``.
    """
    if not isinstance(m, Affine4):
        m = Affine4(m)
    if np.array_equal(m.matrix, np.eye(4)):
        return vol
    c = volume_center(vol.shape)
    rel = voxel_grid(vol.shape) - c
    lin = m.matrix[:3, :3]
    # explicit per-row sums keep identity maps exact (no BLAS reordering)
    src = np.empty_like(rel)
    for r in range(3):
        src[..., r] = (
            lin[r, 0] * rel[..., 0] + lin[r, 1] * rel[..., 1] + lin[r, 2] * rel[..., 2] + m.matrix[r, 3]
        ) + c[r]
    return Volume3(_sample(vol.data, src).astype(np.float32))


def bspline_weights(n: int, g: int) -> np.ndarray:
    """``(n, g)`` matrix of cubic B-spline weights with clamped borders.

    Control point ``j`` sits at ``j (n-1)/(g-1)``; indices outside
    ``[0, g-1]`` are replicated from the nearest edge, so each row is a
    convex combination of control values.
    """
    if g < 2:
        raise GridTooSmall(f"need at least 2 control points, got {g}")
    w = np.zeros((n, g), dtype=np.float64)
    u = np.arange(n, dtype=np.float64) * ((g - 1) / (n - 1)) if n > 1 else np.zeros(1)
    cell = np.floor(u).astype(np.int64)
    t = u - cell
    basis = (
        (1.0 - t) ** 3 / 6.0,
        (3.0 * t**3 - 6.0 * t**2 + 4.0) / 6.0,
        (-3.0 * t**3 + 3.0 * t**2 + 3.0 * t + 1.0) / 6.0,
        t**3 / 6.0,
    )
    rows = np.arange(n)
    for offset, b in zip((-1, 0, 1, 2), basis):
        j = np.clip(cell + offset, 0, g - 1)
        np.add.at(w, (rows, j), b)
    return w


def bspline_upsample(grid: ControlGrid, target_shape) -> DisplacementField:
    """Dense displacement field from a control grid by separable cubic B-splines."""
    if not isinstance(grid, ControlGrid):
        grid = ControlGrid(grid)
    nx, ny, nz = (int(n) for n in target_shape)
    gx, gy, gz = grid.grid_shape
    wx, wy, wz = bspline_weights(nx, gx), bspline_weights(ny, gy), bspline_weights(nz, gz)
    field = np.einsum("xi,yj,zk,ijkc->xyzc", wx, wy, wz, grid.values, optimize=True)
    return DisplacementField(field)


def warp_displacement(vol: Volume3, field: DisplacementField) -> Volume3:
    """``out[p] = sample(vol, p + field[p])``."""
    if not isinstance(field, DisplacementField):
        field = DisplacementField(field)
    if field.shape != vol.shape:
        raise ShapeMismatch(f"field shape {field.shape} != volume shape {vol.shape}")
    if not field.vectors.any():
        return vol
    src = voxel_grid(vol.shape) + field.vectors
    return Volume3(_sample(vol.data, src).astype(np.float32))
