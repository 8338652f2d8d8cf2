"""Spatial transforms: affine maps, cubic B-spline lattices, stationary
velocity fields, and dense displacement fields.

All transforms map world mm to world mm. Warping is backward (pull-back):
the output image at voxel center ``x`` reads the input at ``phi(x)``, so a
chain ``[affine, displacement]`` is applied left to right to the output
point before sampling.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .volume import (
    GridMismatchError,
    ImageGrid,
    LabelVolume,
    Mask,
    ScalarVolume,
    _trilinear_scatter,
    _trilinear_values,
    _trilinear_values_grad,
)

MAX_SQUARING_STEPS = 12
STEP_RULE_FRACTION = 0.4  # max |v|/2^N must stay below this many min-spacings
SQUARING_SAFETY = 2  # extra halvings beyond the rule; costs little, halves error


@dataclass(frozen=True)
class AffineTransform:
    """x -> matrix @ x + translation, in world mm."""

    matrix: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if abs(np.linalg.det(m)) <= 1e-12:
            raise ValueError("affine matrix is singular")
        m.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "AffineTransform":
        return AffineTransform()

    @staticmethod
    def from_translation(t) -> "AffineTransform":
        return AffineTransform(np.eye(3), t)


def affine_apply(a: AffineTransform, p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return p @ a.matrix.T + a.translation


def affine_invert(a: AffineTransform) -> AffineTransform:
    inv = np.linalg.inv(a.matrix)
    return AffineTransform(inv, -inv @ a.translation)


def affine_compose(outer: AffineTransform, inner: AffineTransform) -> AffineTransform:
    """outer(inner(x))."""
    return AffineTransform(outer.matrix @ inner.matrix, outer.matrix @ inner.translation + outer.translation)


def save_affine(a: AffineTransform, path):
    """12 numbers, row-major matrix then translation."""
    nums = np.concatenate([a.matrix.ravel(), a.translation])
    with open(path, "w") as f:
        f.write(" ".join(f"{x:.17g}" for x in nums) + "\n")


def load_affine(path) -> AffineTransform:
    nums = np.loadtxt(path).ravel()
    if nums.size != 12:
        raise ValueError(f"affine file must hold 12 numbers, got {nums.size}")
    return AffineTransform(nums[:9].reshape(3, 3), nums[9:])


# ---------------------------------------------------------------------------
# cubic B-spline lattice


def _bspline_weights(t: np.ndarray) -> np.ndarray:
    """Cubic B-spline basis values B0..B3 at fractional offsets t in [0,1]; (N,4)."""
    t = np.asarray(t, dtype=np.float64)
    t2 = t * t
    t3 = t2 * t
    w = np.empty(t.shape + (4,))
    w[..., 0] = (1.0 - 3.0 * t + 3.0 * t2 - t3) / 6.0
    w[..., 1] = (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0
    w[..., 2] = (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0
    w[..., 3] = t3 / 6.0
    return w


def _axis_support(s: np.ndarray, nc: int) -> tuple[np.ndarray, np.ndarray]:
    """Base control index and 4 weights for lattice coordinates ``s``.

    Control point j sits at lattice coordinate j-1, so the covered domain is
    s in [0, nc-3]. The top edge is handled by clamping the cell.
    """
    f = np.floor(s).astype(np.int64)
    f = np.clip(f, 0, nc - 4)
    return f, _bspline_weights(s - f)


@dataclass(frozen=True)
class BSplineLattice:
    """Regular cubic B-spline control lattice over a physical box.

    ``coefficients`` has shape (ncx, ncy, ncz, 3) in world mm. The lattice
    axes follow ``direction`` (normally the fixed image's axes); one margin
    control point surrounds the domain on every side for cubic support.
    """

    control_dims: tuple[int, int, int]
    control_spacing: tuple[float, float, float]
    domain_origin: tuple[float, float, float]
    coefficients: np.ndarray
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        cd = tuple(int(d) for d in self.control_dims)
        cs = tuple(float(s) for s in self.control_spacing)
        if any(d < 4 for d in cd):
            raise ValueError("need at least 4 control points per axis (cubic support)")
        if any(s <= 0 for s in cs):
            raise ValueError("control spacing must be positive")
        coef = np.asarray(self.coefficients, dtype=np.float64)
        if coef.shape != cd + (3,):
            raise ValueError(f"coefficient shape {coef.shape} != {cd + (3,)}")
        d = np.asarray(self.direction, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "control_dims", cd)
        object.__setattr__(self, "control_spacing", cs)
        object.__setattr__(self, "domain_origin", tuple(float(o) for o in self.domain_origin))
        object.__setattr__(self, "coefficients", coef)
        object.__setattr__(self, "direction", d)

    @staticmethod
    def for_grid(grid: ImageGrid, control_spacing, coefficients=None) -> "BSplineLattice":
        """Lattice covering ``grid``'s world box plus the cubic-support margin."""
        cs = np.broadcast_to(np.asarray(control_spacing, dtype=np.float64), (3,)).copy()
        extent = (np.array(grid.dims) - 1) * np.array(grid.spacing)
        nc = np.ceil(extent / cs).astype(int) + 4
        nc = np.maximum(nc, 4)
        coef = np.zeros(tuple(nc) + (3,)) if coefficients is None else coefficients
        return BSplineLattice(tuple(nc), tuple(cs), grid.origin, coef, grid.direction)

    def lattice_coords(self, p: np.ndarray) -> np.ndarray:
        """World points (N,3) -> continuous lattice coordinates (N,3)."""
        local = (np.asarray(p, dtype=np.float64) - np.asarray(self.domain_origin)) @ self.direction
        return local / np.asarray(self.control_spacing)

    def with_coefficients(self, coef) -> "BSplineLattice":
        return BSplineLattice(self.control_dims, self.control_spacing, self.domain_origin, coef, self.direction)

    # -- evaluation --------------------------------------------------------

    def evaluate(self, p, strict: bool = False) -> np.ndarray:
        """Tensor-product cubic B-spline interpolation at world points (N,3)."""
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        s = self.lattice_coords(p)
        nc = self.control_dims
        inside = np.all((s >= -1e-9) & (s <= np.array(nc) - 3 + 1e-9), axis=1)
        if strict and not inside.all():
            raise ValueError("point outside the lattice-covered domain")
        fx, wx = _axis_support(s[:, 0], nc[0])
        fy, wy = _axis_support(s[:, 1], nc[1])
        fz, wz = _axis_support(s[:, 2], nc[2])
        out = np.zeros((len(p), 3))
        coef = self.coefficients
        for i in range(4):
            for j in range(4):
                wij = wx[:, i] * wy[:, j]
                for k in range(4):
                    w = wij * wz[:, k]
                    out += w[:, None] * coef[fx + i, fy + j, fz + k]
        out[~inside] = 0.0
        return out

    def _grid_axis_weights(self, grid: ImageGrid):
        """Per-axis dense weight matrices for an axis-aligned evaluation grid."""
        if np.max(np.abs(grid.direction - self.direction)) > 1e-9:
            return None
        offset = (np.asarray(grid.origin) - np.asarray(self.domain_origin)) @ self.direction
        offset = offset / np.asarray(self.control_spacing)
        step = np.asarray(grid.spacing) / np.asarray(self.control_spacing)
        mats = []
        for ax in range(3):
            s = offset[ax] + step[ax] * np.arange(grid.dims[ax])
            if s.min() < -1e-9 or s.max() > self.control_dims[ax] - 3 + 1e-9:
                return None
            f, w = _axis_support(s, self.control_dims[ax])
            mat = np.zeros((grid.dims[ax], self.control_dims[ax]))
            rows = np.arange(grid.dims[ax])
            for k in range(4):
                mat[rows, f + k] += w[:, k]
            mats.append(mat)
        return mats

    def evaluate_on_grid(self, grid: ImageGrid) -> np.ndarray:
        """Field values at all voxel centers, shape (nx,ny,nz,3).

        Uses a separable tensor contraction when the grid shares the lattice
        axes (the common case); falls back to pointwise evaluation otherwise.
        """
        mats = self._grid_axis_weights(grid)
        if mats is None:
            return self.evaluate(grid.voxel_centers()).reshape(grid.dims + (3,), order="F")
        wx, wy, wz = mats
        return np.einsum("xa,yb,zc,abcd->xyzd", wx, wy, wz, self.coefficients, optimize=True)

    def project_gradient(self, grid: ImageGrid, voxel_grad: np.ndarray) -> np.ndarray:
        """Adjoint of evaluate_on_grid: pull a (nx,ny,nz,3) voxelwise gradient
        back onto the control coefficients."""
        mats = self._grid_axis_weights(grid)
        if mats is None:
            # pointwise fallback: accumulate 64 weighted scatters
            p = grid.voxel_centers()
            s = self.lattice_coords(p)
            nc = self.control_dims
            fx, wx = _axis_support(s[:, 0], nc[0])
            fy, wy = _axis_support(s[:, 1], nc[1])
            fz, wz = _axis_support(s[:, 2], nc[2])
            g = voxel_grad.reshape(-1, 3, order="F")
            out = np.zeros(nc + (3,))
            flat = out.reshape(-1, 3)
            for i in range(4):
                for j in range(4):
                    for k in range(4):
                        w = wx[:, i] * wy[:, j] * wz[:, k]
                        lin = (fx + i) * nc[1] * nc[2] + (fy + j) * nc[2] + (fz + k)
                        np.add.at(flat, lin, w[:, None] * g)
            return out
        wx, wy, wz = mats
        return np.einsum("xa,yb,zc,xyzd->abcd", wx, wy, wz, voxel_grad, optimize=True)


def bspline_evaluate(lattice: BSplineLattice, p, strict: bool = False) -> np.ndarray:
    out = lattice.evaluate(p, strict=strict)
    return out if out.shape[0] > 1 else out[0]


@dataclass(frozen=True)
class VelocityField:
    """Stationary velocity parameterized on a B-spline lattice (velocity-FFD)."""

    lattice: BSplineLattice

    def negated(self) -> "VelocityField":
        return VelocityField(self.lattice.with_coefficients(-self.lattice.coefficients))


@dataclass(frozen=True)
class DisplacementField:
    """Dense displacement u on a grid; the transform is phi(x) = x + u(x)."""

    grid: ImageGrid
    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.shape != self.grid.dims + (3,):
            raise ValueError(f"vector shape {v.shape} != {self.grid.dims + (3,)}")
        if not np.all(np.isfinite(v)):
            raise ValueError("displacement field contains NaN/Inf")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    @staticmethod
    def zero(grid: ImageGrid) -> "DisplacementField":
        return DisplacementField(grid, np.zeros(grid.dims + (3,)))

    def sample(self, p, boundary: str = "clamp") -> np.ndarray:
        """Interpolate the displacement vectors at world points (N,3)."""
        idx = self.grid.index_from_world(np.atleast_2d(p))
        return _trilinear_values(self.vectors, idx, boundary)

    def apply(self, p) -> np.ndarray:
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        return p + self.sample(p)

    def max_magnitude(self) -> float:
        return float(np.sqrt((self.vectors**2).sum(axis=-1)).max())


# ---------------------------------------------------------------------------
# flow integration, composition, inversion


def squaring_steps(max_velocity_mm: float, grid: ImageGrid) -> int:
    """Number of scaling-and-squaring halvings for the step-size rule."""
    limit = STEP_RULE_FRACTION * min(grid.spacing)
    if max_velocity_mm <= limit or limit <= 0:
        return 0
    n = int(np.ceil(np.log2(max_velocity_mm / limit))) + SQUARING_SAFETY
    if n > MAX_SQUARING_STEPS:
        warnings.warn(
            f"squaring steps capped at {MAX_SQUARING_STEPS} (needed {n}); "
            "step-size rule violated"
        )
        n = MAX_SQUARING_STEPS
    return n


def compose(outer: DisplacementField, inner: DisplacementField) -> DisplacementField:
    """(outer o inner)(x) = x + u_in(x) + u_out(x + u_in(x))."""
    if not outer.grid.same_as(inner.grid):
        raise GridMismatchError("compose needs both fields on the same grid")
    grid = outer.grid
    pts = grid.voxel_centers()
    u_in = inner.vectors.reshape(-1, 3, order="F")
    moved = pts + u_in
    u_out = outer.sample(moved, boundary="clamp")
    total = (u_in + u_out).reshape(grid.dims + (3,), order="F")
    return DisplacementField(grid, total)


def exp_velocity(v: VelocityField, grid: ImageGrid, num_steps: int | None = None) -> DisplacementField:
    """Exponentiate a stationary velocity by scaling and squaring.

    The velocity is rendered on ``grid``, divided by 2^N with N from the
    step-size rule (or ``num_steps`` if given), then self-composed N times.
    """
    vec = v.lattice.evaluate_on_grid(grid)
    vmax = float(np.sqrt((vec**2).sum(axis=-1)).max())
    n = squaring_steps(vmax, grid) if num_steps is None else int(num_steps)
    u, _ = _exp_cached(vec.reshape(-1, 3, order="F"), grid, n, keep_cache=False)
    return DisplacementField(grid, u.reshape(grid.dims + (3,), order="F"))


def _exp_cached(
    vec: np.ndarray, grid: ImageGrid, n: int, keep_cache: bool = True
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Scaling and squaring on flat voxel vectors, keeping every intermediate.

    Returns the final displacement (N,3) and the list [u_0 .. u_{n-1}] of
    pre-squaring fields needed to backpropagate through the recursion
    u_{k+1}(x) = u_k(x) + u_k(x + u_k(x)).
    """
    u = vec.reshape(-1, 3, order="F") / (2.0**n)
    # index_from_world is affine, so precompute it at the voxel centers and
    # add only the (linearly mapped) displacement inside the loop
    idx0 = grid.index_mesh().astype(np.float64)
    disp_to_idx = grid.direction / np.asarray(grid.spacing)[None, :]
    cache: list[np.ndarray] = []
    for _ in range(n):
        if keep_cache:
            cache.append(u)
        idx = idx0 + u @ disp_to_idx
        shaped = u.reshape(grid.dims + (3,), order="F")
        u = u + _trilinear_values(shaped, idx, "clamp")
    return u, cache


def _exp_adjoint(grid: ImageGrid, cache: list[np.ndarray], gbar: np.ndarray) -> np.ndarray:
    """Backpropagate d(cost)/d(final displacement) through the squarings.

    ``gbar`` holds per-voxel gradients (N,3) w.r.t. the exponentiated field;
    the return value is the gradient w.r.t. the scaled field u_0 = v / 2^n.
    Each squaring u_{k+1}(x) = u_k(x) + u_k(x + u_k(x)) contributes three
    terms: the direct one, the interpolant's spatial derivative at the
    shifted point, and the trilinear scatter of the sampled read.
    """
    pts = grid.voxel_centers()
    idx_from_world = np.linalg.inv(grid.direction * np.asarray(grid.spacing))
    g = gbar
    for u in reversed(cache):
        shaped = u.reshape(grid.dims + (3,), order="F")
        idx = grid.index_from_world(pts + u)
        _, g_idx = _trilinear_values_grad(shaped, idx, "clamp")
        # g_idx is (N,3,3): d u_r / d index_a; chain to world coordinates
        new = g + np.einsum("nr,nra->na", g, g_idx @ idx_from_world)
        new += _trilinear_scatter(grid.dims, idx, g).reshape(-1, 3, order="F")
        g = new
    return g


def invert_displacement(
    d: DisplacementField, iters: int = 30, tol: float = 1e-3
) -> tuple[DisplacementField, float]:
    """Fixed-point inversion: u_inv(x) <- -u(x + u_inv(x)).

    Returns the inverse and the final max update (mm). For SVF-derived
    transforms prefer ``exp_velocity(v.negated(), grid)``.
    """
    grid = d.grid
    pts = grid.voxel_centers()
    u_inv = np.zeros_like(pts)
    residual = np.inf
    for _ in range(iters):
        u_new = -d.sample(pts + u_inv, boundary="clamp")
        residual = float(np.abs(u_new - u_inv).max())
        u_inv = u_new
        if residual < tol:
            break
    else:
        warnings.warn(f"displacement inversion stopped at residual {residual:.3g} mm")
    return DisplacementField(grid, u_inv.reshape(grid.dims + (3,), order="F")), residual


# ---------------------------------------------------------------------------
# Jacobian analysis


def jacobian_matrix(d: DisplacementField) -> np.ndarray:
    """Spatial gradient du_i/dx_j in world mm, shape (nx,ny,nz,3,3)."""
    g = d.grid
    if min(g.dims) < 3:
        raise ValueError("jacobian needs at least 3 voxels per axis")
    # index-space central differences (one-sided at the boundary), then
    # chain through world = origin + D S index
    jac_idx = np.stack(
        [np.stack(np.gradient(d.vectors[..., c], axis=(0, 1, 2)), axis=-1) for c in range(3)],
        axis=-2,
    )
    world_from_idx = g.direction * np.asarray(g.spacing)
    idx_from_world = np.linalg.inv(world_from_idx)
    return jac_idx @ idx_from_world


def jacobian_det(d: DisplacementField) -> ScalarVolume:
    """det(I + grad u), spacing-aware."""
    jac = jacobian_matrix(d) + np.eye(3)
    return ScalarVolume(d.grid, np.linalg.det(jac))


def interior_mask(grid: ImageGrid, margin: int = 1) -> Mask:
    """Voxels at least ``margin`` voxels away from the grid boundary."""
    bits = np.zeros(grid.dims, dtype=bool)
    sl = tuple(slice(margin, n - margin) for n in grid.dims)
    bits[sl] = True
    return Mask(grid, bits)


def folding_ratio(d: DisplacementField, roi: Mask | None = None) -> float:
    """Fraction of voxels with non-positive Jacobian determinant."""
    det = jacobian_det(d).values
    if roi is None:
        sel = np.ones(det.shape, dtype=bool)
    else:
        if not roi.grid.same_as(d.grid):
            raise GridMismatchError("roi grid does not match the field grid")
        sel = roi.bits
        if not sel.any():
            raise ValueError("empty roi")
    return float((det[sel] <= 0).sum() / sel.sum())


# ---------------------------------------------------------------------------
# warping


def chain_points(chain, p: np.ndarray) -> np.ndarray:
    """Apply a transform chain (left to right) to points (N,3)."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    for t in chain:
        if isinstance(t, AffineTransform):
            p = affine_apply(t, p)
        elif isinstance(t, DisplacementField):
            p = p + t.sample(p, boundary="clamp")
        else:
            raise TypeError(f"unsupported chain element {type(t).__name__}")
    return p


def chain_to_field(chain, grid: ImageGrid) -> DisplacementField:
    """Render a transform chain as one dense displacement field on ``grid``."""
    pts = grid.voxel_centers()
    moved = chain_points(chain, pts)
    return DisplacementField(grid, (moved - pts).reshape(grid.dims + (3,), order="F"))


def warp_scalar(vol: ScalarVolume, chain, out_grid: ImageGrid) -> ScalarVolume:
    """Pull-back warp: output(x) = vol(phi(x)), trilinear, zero outside."""
    if not chain:
        raise ValueError("empty transform chain")
    pts = chain_points(chain, out_grid.voxel_centers())
    idx = vol.grid.index_from_world(pts)
    vals = _trilinear_values(np.asarray(vol.values, dtype=np.float64), idx, "zero")
    return ScalarVolume(out_grid, vals.reshape(out_grid.dims, order="F"))


def warp_labels(
    labels: LabelVolume, chain, out_grid: ImageGrid
) -> tuple[LabelVolume, dict[int, ScalarVolume]]:
    """Warp each label's one-hot indicator; hard labels by argmax.

    Returns (hard labels, {label id -> soft map}); the background indicator
    participates in the argmax, and ties resolve to the lowest label id.
    """
    if not chain:
        raise ValueError("empty transform chain")
    ids = labels.ids()
    pts = chain_points(chain, out_grid.voxel_centers())
    idx = labels.grid.index_from_world(pts)

    soft = {}
    stack = []
    bg = (labels.labels == 0).astype(np.float64)
    stack.append(_trilinear_values(bg, idx, "zero"))
    for lid in ids:
        onehot = (labels.labels == lid).astype(np.float64)
        vals = _trilinear_values(onehot, idx, "zero")
        soft[lid] = ScalarVolume(out_grid, vals.reshape(out_grid.dims, order="F"))
        stack.append(vals)
    arr = np.stack(stack, axis=0)  # (1 + n_ids, nvox)
    winner = np.argmax(arr, axis=0)  # argmax takes the first (lowest) on ties
    id_lut = np.array([0] + ids)
    hard = id_lut[winner].reshape(out_grid.dims, order="F")
    # nothing warped in (all indicators 0) stays background
    hard[arr.max(axis=0).reshape(out_grid.dims, order="F") == 0.0] = 0
    return LabelVolume(out_grid, hard, labels.label_names), soft
