"""Pairwise registration: affine stage, then multi-resolution diffeomorphic
B-spline (velocity-FFD) stage.

All transforms estimated here are pull-back maps ``phi: fixed -> moving``;
the warped moving image at fixed-grid voxel ``x`` is ``M(phi(x))``. The
deformable transform is ``phi(x) = A(x + u(x))`` with ``u = exp(v)`` the flow
of a stationary velocity field parameterized on a B-spline lattice.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .transforms import (
    AffineTransform,
    BSplineLattice,
    DisplacementField,
    VelocityField,
    _exp_adjoint,
    _exp_cached,
    affine_apply,
    chain_to_field,
    exp_velocity,
    squaring_steps,
)
from .volume import (
    GridMismatchError,
    ImageGrid,
    Mask,
    ScalarVolume,
    _trilinear_values,
    _trilinear_values_grad,
    downsample2,
)

ARMIJO_C = 1e-4
STEP_SHRINK = 0.5


@dataclass(frozen=True)
class RegConfig:
    metric: str = "ssd"  # or "ncc"
    lam: float = 1e-3  # regularization weight (phantom-tuned default)
    levels: int = 3
    control_spacing_schedule: tuple | None = None  # mm per level, coarse->fine
    max_iters: int = 100
    # Per-level iteration caps, coarse->fine.  Finer levels are far more
    # expensive per iteration and start from the upsampled coarse solution,
    # so they need fewer steps.  None falls back to max_iters everywhere.
    level_max_iters: tuple | None = (100, 60, 25)
    step_init: float = 1.0  # mm of max coefficient motion for the first trial
    step_shrink: float = STEP_SHRINK
    grad_tol: float = 1e-10  # absolute max-|gradient| stopping threshold
    step_tol_mm: float = 0.01  # stop when accepted updates shrink below this
    affine_max_iters: int = 100
    affine_levels: int = 3
    affine_step_init: float = 1.0

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.metric not in ("ssd", "ncc"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.control_spacing_schedule is not None:
            if len(self.control_spacing_schedule) != self.levels:
                raise ValueError("schedule length must equal levels")

    def schedule_mm(self, grid: ImageGrid) -> list[np.ndarray]:
        """Control spacings per level; default 4/2/1 x 8 fixed-grid voxels."""
        if self.control_spacing_schedule is not None:
            return [np.broadcast_to(np.asarray(s, dtype=float), (3,)).copy()
                    for s in self.control_spacing_schedule]
        base = 8.0 * np.asarray(grid.spacing)
        factors = [2.0 ** (self.levels - 1 - i) for i in range(self.levels)]
        return [f * base for f in factors]


@dataclass
class RegResult:
    affine: AffineTransform
    velocity: VelocityField | None
    total_field: DisplacementField
    metric_trace: list[float]
    converged: bool


# ---------------------------------------------------------------------------
# similarity metrics


def metric_ssd(fixed: ScalarVolume, warped: ScalarVolume, mask: Mask | None = None):
    """Mean squared difference over the mask; returns (cost, dC/dwarped)."""
    if not fixed.grid.same_as(warped.grid):
        raise GridMismatchError("metric inputs live on different grids")
    sel = _mask_bits(fixed, mask)
    n = int(sel.sum())
    if n == 0:
        raise ValueError("empty metric mask")
    diff = np.where(sel, np.asarray(warped.values, np.float64) - fixed.values, 0.0)
    cost = float((diff**2).sum() / n)
    return cost, 2.0 * diff / n


def metric_ncc(fixed: ScalarVolume, warped: ScalarVolume, mask: Mask | None = None):
    """1 - (global normalized cross-correlation)^2 with analytic derivative."""
    if not fixed.grid.same_as(warped.grid):
        raise GridMismatchError("metric inputs live on different grids")
    sel = _mask_bits(fixed, mask)
    n = int(sel.sum())
    if n == 0:
        raise ValueError("empty metric mask")
    f = np.asarray(fixed.values, np.float64)[sel]
    w = np.asarray(warped.values, np.float64)[sel]
    fc = f - f.mean()
    wc = w - w.mean()
    sff = float(fc @ fc)
    sww = float(wc @ wc)
    if sff <= 0 or sww <= 0:
        raise ValueError("zero intensity variance over the mask")
    sfw = float(fc @ wc)
    r = sfw / np.sqrt(sff * sww)
    cost = 1.0 - r * r
    # d r / d w_k = (fc_k - (sfw/sww) wc_k) / sqrt(sff*sww); mean-centering is
    # absorbed because sum(fc) = sum(wc) = 0
    dr = (fc - (sfw / sww) * wc) / np.sqrt(sff * sww)
    deriv = np.zeros(fixed.grid.dims)
    deriv[sel] = -2.0 * r * dr
    return cost, deriv


def _mask_bits(vol: ScalarVolume, mask: Mask | None) -> np.ndarray:
    if mask is None:
        return np.ones(vol.grid.dims, dtype=bool)
    if not mask.grid.same_as(vol.grid):
        raise GridMismatchError("mask grid does not match image grid")
    return mask.bits


_METRICS = {"ssd": metric_ssd, "ncc": metric_ncc}


# ---------------------------------------------------------------------------
# bending energy (FFD smoothness penalty)

# (axis pair, multiplicity): pure second derivatives once, mixed ones twice
_BENDING_TERMS = [((0, 0), 1.0), ((1, 1), 1.0), ((2, 2), 1.0),
                  ((0, 1), 2.0), ((0, 2), 2.0), ((1, 2), 2.0)]


def _second_diff(c: np.ndarray, axis: int, h: float) -> np.ndarray:
    s1 = [slice(None)] * c.ndim
    s0 = [slice(None)] * c.ndim
    s2 = [slice(None)] * c.ndim
    s0[axis] = slice(0, -2)
    s1[axis] = slice(1, -1)
    s2[axis] = slice(2, None)
    return (c[tuple(s2)] - 2.0 * c[tuple(s1)] + c[tuple(s0)]) / (h * h)


def _second_diff_adjoint(r: np.ndarray, axis: int, h: float, out: np.ndarray):
    s0 = [slice(None)] * out.ndim
    s1 = [slice(None)] * out.ndim
    s2 = [slice(None)] * out.ndim
    s0[axis] = slice(0, -2)
    s1[axis] = slice(1, -1)
    s2[axis] = slice(2, None)
    out[tuple(s2)] += r / (h * h)
    out[tuple(s1)] += -2.0 * r / (h * h)
    out[tuple(s0)] += r / (h * h)


def _mixed_diff(c: np.ndarray, ax_a: int, ax_b: int, ha: float, hb: float) -> np.ndarray:
    sa_p = [slice(None)] * c.ndim
    sa_m = [slice(None)] * c.ndim
    sa_p[ax_a] = slice(2, None)
    sa_m[ax_a] = slice(0, -2)
    d = (c[tuple(sa_p)] - c[tuple(sa_m)]) / (2.0 * ha)
    sb_p = [slice(None)] * c.ndim
    sb_m = [slice(None)] * c.ndim
    sb_p[ax_b] = slice(2, None)
    sb_m[ax_b] = slice(0, -2)
    return (d[tuple(sb_p)] - d[tuple(sb_m)]) / (2.0 * hb)


def _mixed_diff_adjoint(r: np.ndarray, ax_a: int, ax_b: int, ha: float, hb: float, out: np.ndarray):
    tmp = np.zeros([out.shape[i] - (2 if i == ax_a else 0) for i in range(out.ndim)])
    sb_p = [slice(None)] * out.ndim
    sb_m = [slice(None)] * out.ndim
    sb_p[ax_b] = slice(2, None)
    sb_m[ax_b] = slice(0, -2)
    tmp[tuple(sb_p)] += r / (2.0 * hb)
    tmp[tuple(sb_m)] -= r / (2.0 * hb)
    sa_p = [slice(None)] * out.ndim
    sa_m = [slice(None)] * out.ndim
    sa_p[ax_a] = slice(2, None)
    sa_m[ax_a] = slice(0, -2)
    out[tuple(sa_p)] += tmp / (2.0 * ha)
    out[tuple(sa_m)] -= tmp / (2.0 * ha)


def bending_energy(lattice: BSplineLattice) -> tuple[float, np.ndarray]:
    """Sum of squared second differences of the control coefficients
    (standard FFD bending penalty on control-point stencils).

    Returns (energy, gradient w.r.t. coefficients). Vanishes exactly for any
    globally affine coefficient pattern.
    """
    c = lattice.coefficients
    h = lattice.control_spacing
    energy = 0.0
    grad = np.zeros_like(c)
    for (a, b), mult in _BENDING_TERMS:
        if a == b:
            r = _second_diff(c, a, h[a])
            energy += mult * float((r**2).sum())
            _second_diff_adjoint(2.0 * mult * r, a, h[a], grad)
        else:
            r = _mixed_diff(c, a, b, h[a], h[b])
            energy += mult * float((r**2).sum())
            _mixed_diff_adjoint(2.0 * mult * r, a, b, h[a], h[b], grad)
    return energy, grad


# ---------------------------------------------------------------------------
# shared helpers


def _image_pyramid(vol: ScalarVolume, levels: int) -> list[ScalarVolume]:
    """Coarsest-first pyramid with ``levels`` entries (finest = input)."""
    pyr = [vol]
    for _ in range(levels - 1):
        v = pyr[-1]
        if min(v.grid.dims) < 4:
            break
        pyr.append(downsample2(v))
    return pyr[::-1]


def _mask_pyramid(mask: Mask | None, pyramid: list[ScalarVolume]) -> list[Mask | None]:
    if mask is None:
        return [None] * len(pyramid)
    out = []
    mv = ScalarVolume(mask.grid, mask.bits.astype(np.float32))
    for lvl in pyramid:
        cur = mv
        while cur.grid.dims != lvl.grid.dims and min(cur.grid.dims) >= 2:
            cur = downsample2(cur)
        bits = np.asarray(cur.values) > 0.25
        out.append(Mask(lvl.grid, bits) if bits.any() else None)
    return out


def _sample_scalar(values: np.ndarray, grid: ImageGrid, pts: np.ndarray) -> np.ndarray:
    return _trilinear_values(np.asarray(values, np.float64), grid.index_from_world(pts), "zero")


def _sample_scalar_grad(values: np.ndarray, grid: ImageGrid, pts: np.ndarray):
    """Interpolated value and its exact gradient w.r.t. the world point (N,3).

    Differentiating the interpolant itself (rather than resampling a
    precomputed gradient image) keeps analytic cost gradients consistent
    with finite differences of the actual objective.
    """
    vals, g_idx = _trilinear_values_grad(
        np.asarray(values, np.float64), grid.index_from_world(pts), "zero"
    )
    idx_from_world = np.linalg.inv(grid.direction * np.asarray(grid.spacing))
    return vals, g_idx @ idx_from_world


# ---------------------------------------------------------------------------
# affine registration


def _affine_to_params(a: AffineTransform, center: np.ndarray) -> np.ndarray:
    """(B, t) parameterization around ``center``: phi(x) = c + t + (I+B)(x-c)."""
    b = a.matrix - np.eye(3)
    t = affine_apply(a, center) - center
    return np.concatenate([b.ravel(), t])


def _params_to_affine(params: np.ndarray, center: np.ndarray) -> AffineTransform:
    b = params[:9].reshape(3, 3)
    t = params[9:]
    m = np.eye(3) + b
    trans = center + t - m @ center
    return AffineTransform(m, trans)


def register_affine(
    fixed: ScalarVolume,
    moving: ScalarVolume,
    init: AffineTransform | None = None,
    cfg: RegConfig | None = None,
    mask: Mask | None = None,
) -> AffineTransform:
    """12-parameter affine registration by preconditioned gradient descent
    with backtracking line search, coarse to fine.

    ``init`` and the result are pull-back maps (fixed space -> moving space).
    """
    cfg = cfg or RegConfig()
    metric = _METRICS[cfg.metric]
    pyr_f = _image_pyramid(fixed, cfg.affine_levels)
    pyr_m = _image_pyramid(moving, cfg.affine_levels)
    masks = _mask_pyramid(mask, pyr_f)
    center = fixed.grid.world_from_index((np.array(fixed.grid.dims) - 1) / 2.0)
    half_extent = float(np.mean((np.array(fixed.grid.dims) - 1) * np.array(fixed.grid.spacing)) / 2.0)
    precond = np.concatenate([np.full(9, 1.0 / half_extent**2), np.ones(3)])

    params = _affine_to_params(init or AffineTransform.identity(), center)

    for f_lvl, m_lvl, msk in zip(pyr_f, pyr_m, masks):
        pts = f_lvl.grid.voxel_centers()
        pts_c = pts - center

        def cost_at(p):
            a = _params_to_affine(p, center)
            moved = affine_apply(a, pts)
            w = ScalarVolume(f_lvl.grid, _sample_scalar(m_lvl.values, m_lvl.grid, moved).reshape(f_lvl.grid.dims, order="F"))
            return metric(f_lvl, w, msk)[0]

        step = cfg.affine_step_init
        cost = cost_at(params)
        g0 = None
        for _ in range(cfg.affine_max_iters):
            a = _params_to_affine(params, center)
            moved = affine_apply(a, pts)
            warped_flat, gm = _sample_scalar_grad(m_lvl.values, m_lvl.grid, moved)
            warped = warped_flat.reshape(f_lvl.grid.dims, order="F")
            cost, deriv = metric(f_lvl, ScalarVolume(f_lvl.grid, warped), msk)
            dvec = deriv.reshape(-1, order="F")
            gpt = dvec[:, None] * gm  # dC/dphi(x), (N,3)
            g_t = gpt.sum(axis=0)
            g_b = gpt.T @ pts_c  # g_b[a,b] = sum dC/dphi_a * (x-c)_b
            grad = np.concatenate([g_b.ravel(), g_t])
            direction = -precond * grad
            slope = float(grad @ direction)
            gmax = np.abs(grad).max()
            if g0 is None:
                g0 = gmax
            # converged when the gradient has collapsed relative to its start
            if gmax <= 1e-3 * g0 or gmax == 0.0:
                break
            accepted = False
            s = step
            for _ in range(30):
                trial = params + s * direction
                c_new = cost_at(trial)
                if c_new <= cost + ARMIJO_C * s * slope:
                    params = trial
                    cost = c_new
                    step = s * 2.0
                    accepted = True
                    break
                s *= cfg.step_shrink
            if not accepted:
                break
    return _params_to_affine(params, center)


# ---------------------------------------------------------------------------
# deformable (velocity-FFD) registration


def _upsample_velocity(v: VelocityField, new_lattice: BSplineLattice) -> BSplineLattice:
    """Initialize a finer lattice from a coarser velocity.

    Uses exact binary B-spline subdivision when the spacing halves; otherwise
    falls back to sampling the field at the new control nodes (approximate,
    only used as an optimizer init).
    """
    old = v.lattice
    ratio = np.asarray(old.control_spacing) / np.asarray(new_lattice.control_spacing)
    if np.allclose(ratio, 2.0, atol=1e-9) and np.allclose(old.domain_origin, new_lattice.domain_origin):
        coef = old.coefficients
        for ax in range(3):
            coef = _subdivide_axis(coef, ax, new_lattice.control_dims[ax])
        return new_lattice.with_coefficients(coef)
    nodes_idx = np.stack(
        np.meshgrid(*[np.arange(n) - 1.0 for n in new_lattice.control_dims], indexing="ij"),
        axis=-1,
    ).reshape(-1, 3)
    world = np.asarray(new_lattice.domain_origin) + (
        nodes_idx * np.asarray(new_lattice.control_spacing)
    ) @ new_lattice.direction.T
    vals = old.evaluate(world)
    return new_lattice.with_coefficients(vals.reshape(new_lattice.control_dims + (3,)))


def _subdivide_axis(c: np.ndarray, axis: int, m_count: int) -> np.ndarray:
    """Cubic B-spline knot-doubling along one axis (exact field refinement).

    Control point p lives at lattice coordinate p-1; the refined point m at
    half-spacing coordinate (m-1)/2.  On-knot points take the (1,6,1)/8
    stencil, mid-knot points the (1,1)/2 stencil.  Indices are clamped at the
    margins, which only affects nodes whose support lies outside the domain.
    """
    c = np.moveaxis(c, axis, 0)
    n = c.shape[0]
    out = np.empty((m_count,) + c.shape[1:])
    m = np.arange(m_count)
    odd = (m % 2) == 1
    k = (m - 1) // 2
    im = np.clip(k, 0, n - 1)
    i0 = np.clip(k + 1, 0, n - 1)
    ip = np.clip(k + 2, 0, n - 1)
    out[odd] = (c[im[odd]] + 6.0 * c[i0[odd]] + c[ip[odd]]) / 8.0
    j = (m - 2) // 2
    a0 = np.clip(j + 1, 0, n - 1)
    a1 = np.clip(j + 2, 0, n - 1)
    ev = ~odd
    out[ev] = (c[a0[ev]] + c[a1[ev]]) / 2.0
    return np.moveaxis(out, 0, axis)


def total_cost(
    fixed: ScalarVolume,
    moving: ScalarVolume,
    affine: AffineTransform,
    v: VelocityField,
    cfg: RegConfig,
    mask: Mask | None = None,
    num_steps: int | None = None,
) -> float:
    """D(F, M o (A o exp(v))) + lambda * bending(v), exactly as optimized."""
    metric = _METRICS[cfg.metric]
    u = exp_velocity(v, fixed.grid, num_steps=num_steps)
    pts = fixed.grid.voxel_centers() + u.vectors.reshape(-1, 3, order="F")
    moved = affine_apply(affine, pts)
    warped = _sample_scalar(moving.values, moving.grid, moved).reshape(fixed.grid.dims, order="F")
    d, _ = metric(fixed, ScalarVolume(fixed.grid, warped), mask)
    reg, _ = bending_energy(v.lattice)
    return d + cfg.lam * reg


def _ffd_cost_grad(f_lvl, m_lvl, msk, affine, lattice, cfg, metric, num_steps, want_grad=True):
    """Cost (and analytic gradient w.r.t. the velocity lattice coefficients).

    The transform derivative uses the first-order approximation
    d exp(v)(x) / d v(x) ~ I (exact when num_steps == 0).
    """
    grid = f_lvl.grid
    vec = lattice.evaluate_on_grid(grid)
    if num_steps is None:
        vmax = float(np.sqrt((vec**2).sum(axis=-1)).max())
        num_steps = squaring_steps(vmax, grid)
    u_flat, cache = _exp_cached(vec, grid, num_steps)
    moved = affine_apply(affine, grid.voxel_centers() + u_flat)
    reg, reg_grad = bending_energy(lattice)
    if not want_grad:
        warped = _sample_scalar(m_lvl.values, m_lvl.grid, moved).reshape(grid.dims, order="F")
        d_cost, _ = metric(f_lvl, ScalarVolume(grid, warped), msk)
        return d_cost + cfg.lam * reg, None
    warped_flat, gm = _sample_scalar_grad(m_lvl.values, m_lvl.grid, moved)
    warped = warped_flat.reshape(grid.dims, order="F")
    d_cost, deriv = metric(f_lvl, ScalarVolume(grid, warped), msk)
    cost = d_cost + cfg.lam * reg
    # chain rule: phi(x) = A(x + u(x)), d phi/d u = A_lin, then back through
    # the scaling-and-squaring recursion to v, then B-spline projection
    gpt = (deriv.reshape(-1, order="F")[:, None] * gm) @ affine.matrix
    if cache:
        gpt = _exp_adjoint(grid, cache, gpt) / (2.0**num_steps)
    grad_coef = lattice.project_gradient(grid, gpt.reshape(grid.dims + (3,), order="F"))
    grad_coef += cfg.lam * reg_grad
    return cost, grad_coef


def register_ffd(
    fixed: ScalarVolume,
    moving: ScalarVolume,
    affine_init: AffineTransform,
    cfg: RegConfig | None = None,
    mask: Mask | None = None,
    num_steps: int | None = None,
) -> RegResult:
    """Multi-resolution diffeomorphic FFD registration.

    Minimizes similarity + lambda * bending energy over the velocity lattice
    coefficients with L-BFGS, coarse to fine; each finer lattice starts from
    the exactly-refined coarse solution.
    """
    cfg = cfg or RegConfig()
    metric = _METRICS[cfg.metric]
    pyr_f = _image_pyramid(fixed, cfg.levels)
    pyr_m = _image_pyramid(moving, cfg.levels)
    masks = _mask_pyramid(mask, pyr_f)
    schedule = cfg.schedule_mm(fixed.grid)
    if len(pyr_f) != cfg.levels:
        schedule = schedule[-len(pyr_f):]

    trace: list[float] = []
    converged = True
    velocity: VelocityField | None = None

    for lvl, (f_lvl, m_lvl, msk, cp_mm) in enumerate(zip(pyr_f, pyr_m, masks, schedule)):
        lattice = BSplineLattice.for_grid(fixed.grid, cp_mm)
        if velocity is not None:
            lattice = _upsample_velocity(velocity, lattice)

        if cfg.level_max_iters is None:
            lvl_iters = cfg.max_iters
        else:
            lvl_iters = int(cfg.level_max_iters[min(lvl, len(cfg.level_max_iters) - 1)])
        lvl_iters = min(lvl_iters, cfg.max_iters)

        shape = lattice.coefficients.shape
        last_cost = {"c": np.inf}

        def fun(x, lattice=lattice, f_lvl=f_lvl, m_lvl=m_lvl, msk=msk):
            lat = lattice.with_coefficients(x.reshape(shape))
            c, g = _ffd_cost_grad(
                f_lvl, m_lvl, msk, affine_init, lat, cfg, metric, num_steps
            )
            last_cost["c"] = c
            return c, g.ravel()

        # record the best cost seen up to each accepted L-BFGS iterate
        def record(_xk):
            trace.append(min(trace[-1], last_cost["c"]))

        c0, _ = fun(lattice.coefficients.ravel())
        if not np.isfinite(c0):
            warnings.warn(f"non-finite cost at level {lvl}; aborting level")
            converged = False
            velocity = VelocityField(lattice)
            continue
        trace.append(c0)
        res = optimize.minimize(
            fun,
            lattice.coefficients.ravel(),
            jac=True,
            method="L-BFGS-B",
            callback=record,
            options={"maxiter": lvl_iters, "maxcor": 10, "ftol": 1e-12, "gtol": cfg.grad_tol},
        )
        if not res.success and "ITERATIONS" not in str(res.message).upper():
            converged = False
        lattice = lattice.with_coefficients(res.x.reshape(shape))
        velocity = VelocityField(lattice)

    u = exp_velocity(velocity, fixed.grid, num_steps=num_steps)
    total = chain_to_field([u, affine_init], fixed.grid)
    return RegResult(
        affine=affine_init,
        velocity=velocity,
        total_field=total,
        metric_trace=trace,
        converged=converged,
    )
