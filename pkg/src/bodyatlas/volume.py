"""Physically-placed 3D volume containers and resampling.

Conventions used everywhere in this package:

* arrays are indexed ``[ix, iy, iz]`` with x the fastest-varying axis,
* a continuous index ``i`` maps to the *center* of voxel ``i``,
* world coordinates are millimetres: ``world = origin + direction @ (spacing * index)``.

Volumes are immutable after construction (the value buffers are marked
read-only) and therefore safe to share across worker processes/threads.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


class GridMismatchError(ValueError):
    """Two volumes that must share an ImageGrid do not."""


class DegenerateAxisError(ValueError):
    """An operation needs more voxels along an axis than the grid has."""


@dataclass(frozen=True)
class ImageGrid:
    """Voxel lattice with a physical placement in world millimetres."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or len(spacing) != 3:
            raise ValueError("ImageGrid is strictly 3D")
        if any(d < 1 for d in dims):
            raise ValueError(f"every dim must be >= 1, got {dims}")
        if any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise ValueError(f"every spacing must be finite and > 0, got {spacing}")
        direction = np.asarray(self.direction, dtype=np.float64).reshape(3, 3)
        if np.max(np.abs(direction.T @ direction - np.eye(3))) >= 1e-6:
            raise ValueError("direction matrix is not orthonormal")
        direction.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "direction", direction)

    @property
    def num_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def world_from_index(self, idx) -> np.ndarray:
        """Map continuous voxel indices (..., 3) to world mm."""
        idx = np.asarray(idx, dtype=np.float64)
        local = idx * np.asarray(self.spacing)
        return np.asarray(self.origin) + local @ self.direction.T

    def index_from_world(self, p) -> np.ndarray:
        """Inverse of :meth:`world_from_index`."""
        p = np.asarray(p, dtype=np.float64)
        local = (p - np.asarray(self.origin)) @ self.direction
        return local / np.asarray(self.spacing)

    def index_mesh(self) -> np.ndarray:
        """Integer index triples of all voxels, shape (nvox, 3), x fastest."""
        nx, ny, nz = self.dims
        ix, iy, iz = np.meshgrid(
            np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"
        )
        return np.stack([ix.ravel(order="F"), iy.ravel(order="F"), iz.ravel(order="F")], axis=1)

    def voxel_centers(self) -> np.ndarray:
        """World coordinates of all voxel centers, shape (nvox, 3)."""
        return self.world_from_index(self.index_mesh())

    def same_as(self, other: "ImageGrid", tol: float = 1e-6) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, atol=tol)
            and np.allclose(self.origin, other.origin, atol=tol)
            and np.allclose(self.direction, other.direction, atol=tol)
        )

    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))


def _check_same_grid(a, b):
    if not a.grid.same_as(b.grid):
        raise GridMismatchError("volumes live on different grids")


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ScalarVolume:
    """Real-valued image on an :class:`ImageGrid` (float64 storage)."""

    grid: ImageGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != self.grid.dims:
            raise ValueError(
                f"value shape {values.shape} does not match grid dims {self.grid.dims}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("scalar volume contains NaN/Inf")
        object.__setattr__(self, "values", _freeze(values))

    def with_values(self, values) -> "ScalarVolume":
        return ScalarVolume(self.grid, values)


@dataclass(frozen=True)
class LabelVolume:
    """Integer label map; 0 is background."""

    grid: ImageGrid
    labels: np.ndarray
    label_names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.array_equal(labels, np.round(labels)):
                raise ValueError("labels must be integers")
            labels = labels.astype(np.int64)
        if labels.min(initial=0) < 0:
            raise ValueError("labels must be non-negative")
        labels = labels.astype(np.uint16 if labels.max(initial=0) < 2**16 else np.uint32)
        if labels.shape != self.grid.dims:
            raise ValueError("label shape does not match grid dims")
        known = set(self.label_names) | {0}
        present = set(np.unique(labels).tolist())
        if self.label_names and not present <= known:
            raise ValueError(f"labels {sorted(present - known)} missing from label_names")
        object.__setattr__(self, "labels", _freeze(labels))

    def ids(self) -> list[int]:
        """Non-background label ids present in the volume."""
        u = np.unique(self.labels)
        return [int(v) for v in u if v != 0]


@dataclass(frozen=True)
class Mask:
    """Boolean voxel set on an :class:`ImageGrid`."""

    grid: ImageGrid
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.shape != self.grid.dims:
            raise ValueError("mask shape does not match grid dims")
        object.__setattr__(self, "bits", _freeze(bits))

    @property
    def count(self) -> int:
        return int(self.bits.sum())


# ---------------------------------------------------------------------------
# sampling


def _corner_axes(values_shape, idx, boundary):
    """Per-axis corner indices, weights, and flat-index strides for trilinear ops."""
    nx, ny, nz = values_shape[:3]
    idx = np.asarray(idx, dtype=np.float64)
    if boundary == "clamp":
        idx = np.clip(idx, 0.0, np.array([nx, ny, nz]) - 1.0)
    elif boundary != "zero":
        raise ValueError(f"unknown boundary policy {boundary!r}")
    i0 = np.floor(idx).astype(np.int64)
    frac = idx - i0
    axes = []
    for a, n in enumerate((nx, ny, nz)):
        j0 = i0[:, a]
        f = frac[:, a]
        j0c = np.clip(j0, 0, n - 1)
        j1c = np.clip(j0 + 1, 0, n - 1)
        # validity is kept separate from the interpolation weight: the
        # zero-padded interpolant has zero CORNER VALUES outside the array,
        # and folding validity into the weights instead would corrupt the
        # difference-based gradients at the boundary band
        if boundary == "zero":
            v0 = ((j0 >= 0) & (j0 < n)).astype(np.float64)
            v1 = ((j0 >= -1) & (j0 < n - 1)).astype(np.float64)
        else:
            v0 = v1 = None  # all valid
        axes.append((j0c, j1c, 1.0 - f, f, v0, v1))
    return axes


def _corner_flat_indices(axes, sx: int, sy: int) -> np.ndarray:
    """Flat corner indices in corner-major layout (8,N)."""
    (jx0, jx1, *_), (jy0, jy1, *_), (jz0, jz1, *_) = axes
    bx0, bx1 = jx0 * sx, jx1 * sx
    by0, by1 = jy0 * sy, jy1 * sy
    return np.stack(
        [
            bx0 + by0 + jz0,
            bx0 + by0 + jz1,
            bx0 + by1 + jz0,
            bx0 + by1 + jz1,
            bx1 + by0 + jz0,
            bx1 + by0 + jz1,
            bx1 + by1 + jz0,
            bx1 + by1 + jz1,
        ]
    )




def _apply_validity(v: np.ndarray, axes) -> np.ndarray:
    """Zero out gathered corner values that lie outside the array."""
    for axis, (_, _, _, _, v0, v1) in enumerate(axes):
        if v0 is None:
            continue
        sh = [1, 1, 1, v.shape[3], 1]
        sh[axis] = 2
        v = v * np.stack([v0, v1]).reshape(sh)
    return v




# scipy modes matching our boundary conventions: "nearest" clamps indices,
# "grid-constant" interpolates against a zero-padded array.
_MAP_MODE = {"clamp": "nearest", "zero": "grid-constant"}


def _trilinear_values(values: np.ndarray, idx: np.ndarray, boundary: str) -> np.ndarray:
    """Trilinear interpolation of a (nx,ny,nz) or (nx,ny,nz,K) array at
    continuous indices (N,3); multi-channel input yields (N,K)."""
    values = np.asarray(values, dtype=np.float64)
    mode = _MAP_MODE[boundary]
    coords = np.ascontiguousarray(idx.T)
    if values.ndim == 3:
        return ndimage.map_coordinates(values, coords, order=1, mode=mode, cval=0.0)
    out = np.empty((idx.shape[0], values.shape[3]), dtype=np.float64)
    for c in range(values.shape[3]):
        out[:, c] = ndimage.map_coordinates(
            values[..., c], coords, order=1, mode=mode, cval=0.0
        )
    return out


def _trilinear_values_grad(
    values: np.ndarray, idx: np.ndarray, boundary: str
) -> tuple[np.ndarray, np.ndarray]:
    """Trilinear value and its exact gradient w.r.t. the continuous index.

    The gradient is that of the interpolant itself (piecewise per cell), so
    finite differences of the sampled value match it to rounding error.
    Multi-channel (nx,ny,nz,K) input yields values (N,K) and grads (N,K,3).
    """
    values = np.asarray(values, dtype=np.float64)
    shape = values.shape
    multi = values.ndim == 4
    flat = values.reshape(shape[0] * shape[1] * shape[2], -1)
    axes = _corner_axes(shape, idx, boundary)
    fi = _corner_flat_indices(axes, shape[1] * shape[2], shape[2])
    n = idx.shape[0]
    v = _apply_validity(
        np.take(flat, fi.reshape(-1), axis=0).reshape(2, 2, 2, n, flat.shape[1]), axes
    )
    (_, _, wx0, wx1, _, _), (_, _, wy0, wy1, _, _), (_, _, wz0, wz1, _, _) = axes
    wz0e, wz1e = wz0[:, None], wz1[:, None]
    t00 = v[0, 0, 0] * wz0e + v[0, 0, 1] * wz1e
    t01 = v[0, 1, 0] * wz0e + v[0, 1, 1] * wz1e
    t10 = v[1, 0, 0] * wz0e + v[1, 0, 1] * wz1e
    t11 = v[1, 1, 0] * wz0e + v[1, 1, 1] * wz1e
    dz00 = v[0, 0, 1] - v[0, 0, 0]
    dz01 = v[0, 1, 1] - v[0, 1, 0]
    dz10 = v[1, 0, 1] - v[1, 0, 0]
    dz11 = v[1, 1, 1] - v[1, 1, 0]
    wy0e, wy1e = wy0[:, None], wy1[:, None]
    ty0 = t00 * wy0e + t01 * wy1e
    ty1 = t10 * wy0e + t11 * wy1e
    dzy0 = dz00 * wy0e + dz01 * wy1e
    dzy1 = dz10 * wy0e + dz11 * wy1e
    dy0 = t01 - t00
    dy1 = t11 - t10
    wx0e, wx1e = wx0[:, None], wx1[:, None]
    out = ty0 * wx0e + ty1 * wx1e
    n_ch = flat.shape[1]
    grad = np.empty((n, n_ch, 3), dtype=np.float64)
    grad[..., 0] = ty1 - ty0
    grad[..., 1] = dy0 * wx0e + dy1 * wx1e
    grad[..., 2] = dzy0 * wx0e + dzy1 * wx1e
    if boundary == "clamp":
        # Outside the domain the clamped interpolant is flat along that axis,
        # so its derivative there is exactly zero.
        dims = np.array(shape[:3], dtype=np.float64)
        inside = (idx >= 0.0) & (idx <= dims - 1.0)
        grad *= inside[:, None, :]
    if multi:
        return out, grad
    return out[:, 0], grad[:, 0, :]


def _trilinear_scatter(shape: tuple[int, int, int], idx: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Adjoint of clamp-boundary trilinear sampling.

    Spreads each row of ``rhs`` (N,K) onto the 8 cell corners of its
    continuous index, so that ``<sample(f, idx), rhs> == <f, scatter(idx, rhs)>``
    for every field ``f`` of the given shape.
    """
    nx, ny, nz = shape
    sx, sy = ny * nz, nz
    size = nx * ny * nz
    (jx0, jx1, wx0, wx1, _, _), (jy0, jy1, wy0, wy1, _, _), (jz0, jz1, wz0, wz1, _, _) = _corner_axes(
        shape, idx, "clamp"
    )
    n_ch = rhs.shape[1]
    out = np.zeros((size, n_ch), dtype=np.float64)
    for jx, wx in ((jx0, wx0), (jx1, wx1)):
        bx = jx * sx
        for jy, wy in ((jy0, wy0), (jy1, wy1)):
            bxy = bx + jy * sy
            wxy = wx * wy
            for jz, wz in ((jz0, wz0), (jz1, wz1)):
                fi = bxy + jz
                w = wxy * wz
                for c in range(n_ch):
                    out[:, c] += np.bincount(fi, weights=w * rhs[:, c], minlength=size)
    return out.reshape(shape + (n_ch,))


def sample_trilinear(vol: ScalarVolume, p, boundary: str = "zero") -> np.ndarray:
    """Sample a scalar volume at world points ``p`` (shape (N,3) or (3,)).

    ``boundary='zero'`` reads 0 outside the voxel-center hull, ``'clamp'``
    reads the nearest voxel.
    """
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    idx = vol.grid.index_from_world(p)
    out = _trilinear_values(np.asarray(vol.values, dtype=np.float64), idx, boundary)
    return out if out.size > 1 else float(out[0])


def sample_nearest(vol: LabelVolume, p) -> np.ndarray:
    """Label of the nearest voxel center; background 0 outside the grid."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    idx = np.round(vol.grid.index_from_world(p)).astype(np.int64)
    dims = np.array(vol.grid.dims)
    ok = np.all((idx >= 0) & (idx < dims), axis=1)
    out = np.zeros(len(idx), dtype=vol.labels.dtype)
    if ok.any():
        j = idx[ok]
        out[ok] = vol.labels[j[:, 0], j[:, 1], j[:, 2]]
    return out if out.size > 1 else int(out[0])


# ---------------------------------------------------------------------------
# resampling / reductions

DOWNSAMPLE_PREFILTER_SIGMA = 0.85  # voxels; anti-alias before block averaging


def downsample2(vol: ScalarVolume) -> ScalarVolume:
    """Halve the resolution: Gaussian prefilter then 2x2x2 block means.

    Output dims are ceil(n/2) per axis (odd axes replicate their edge voxel),
    spacing doubles, and the origin moves to the center of the first block so
    world placement is preserved.
    """
    nx, ny, nz = vol.grid.dims
    if min(nx, ny, nz) < 2:
        raise DegenerateAxisError(f"downsample2 needs every dim >= 2, got {vol.grid.dims}")
    v = ndimage.gaussian_filter(
        np.asarray(vol.values, dtype=np.float64), DOWNSAMPLE_PREFILTER_SIGMA, mode="reflect"
    )
    pad = [(0, n % 2) for n in (nx, ny, nz)]
    v = np.pad(v, pad, mode="edge")
    mx, my, mz = (s // 2 for s in v.shape)
    v = v.reshape(mx, 2, my, 2, mz, 2).mean(axis=(1, 3, 5))

    g = vol.grid
    new_origin = g.world_from_index([0.5, 0.5, 0.5])
    new_grid = ImageGrid(
        dims=(mx, my, mz),
        spacing=tuple(2.0 * s for s in g.spacing),
        origin=tuple(new_origin),
        direction=g.direction,
    )
    return ScalarVolume(new_grid, v)


def center_of_mass(m: Mask) -> np.ndarray:
    """Centroid of set voxels, in world mm."""
    if m.count == 0:
        raise ValueError("center_of_mass of an empty mask")
    idx = np.argwhere(m.bits).astype(np.float64)
    return m.grid.world_from_index(idx.mean(axis=0))
