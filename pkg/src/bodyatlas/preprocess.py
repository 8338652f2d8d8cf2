"""Intensity normalization, body-mask extraction, and global spatial
initialization (center-of-mass translation with optional rigid ICP refinement).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .transforms import AffineTransform
from .volume import GridMismatchError, Mask, ScalarVolume, center_of_mass

ICP_MAX_BOUNDARY_POINTS = 20_000


@dataclass(frozen=True)
class PreprocessConfig:
    clip_low: float = 1.0
    clip_high: float = 99.0
    mask_threshold_mode: str = "otsu"  # or "fixed"
    fixed_threshold: float = 0.1
    morph_radius: int = 1
    icp_enabled: bool = True
    icp_rigid: bool = True  # False: translation-only refinement
    icp_max_iters: int = 50
    icp_tolerance: float = 0.01  # mm change in mean closest-point distance

    def __post_init__(self):
        if not (0 <= self.clip_low < self.clip_high <= 100):
            raise ValueError("need 0 <= clip_low < clip_high <= 100")
        if self.morph_radius < 0:
            raise ValueError("morph_radius must be >= 0")
        if self.mask_threshold_mode not in ("otsu", "fixed"):
            raise ValueError(f"unknown mask_threshold_mode {self.mask_threshold_mode!r}")


def min_max_normalize(vol: ScalarVolume) -> ScalarVolume:
    """Affinely map intensities to [0,1]; constant input becomes all zeros."""
    v = np.asarray(vol.values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi - lo <= 0:
        warnings.warn("constant volume: min-max normalization returns all zeros")
        return vol.with_values(np.zeros_like(v))
    return vol.with_values((v - lo) / (hi - lo))


def contrast_clip(vol: ScalarVolume, p_low: float, p_high: float) -> ScalarVolume:
    """Clamp to empirical percentiles [p_low, p_high], then rescale to [0,1]."""
    if not p_low < p_high:
        raise ValueError("need p_low < p_high")
    v = np.asarray(vol.values, dtype=np.float64)
    q_lo, q_hi = np.percentile(v, [p_low, p_high])
    if q_hi - q_lo <= 0:
        warnings.warn("degenerate percentile range: contrast_clip returns all zeros")
        return vol.with_values(np.zeros_like(v))
    return vol.with_values((np.clip(v, q_lo, q_hi) - q_lo) / (q_hi - q_lo))


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Otsu's threshold on a histogram of the given values."""
    hist, edges = np.histogram(values.ravel(), bins=bins)
    centers = (edges[:-1] + edges[1:]) / 2.0
    w = hist.astype(np.float64)
    total = w.sum()
    cum_w = np.cumsum(w)
    cum_m = np.cumsum(w * centers)
    mean_total = cum_m[-1] / total
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mean_total * cum_w - cum_m) ** 2 / (cum_w * (total - cum_w))
    between[~np.isfinite(between)] = -1.0
    return float(centers[np.argmax(between)])


def body_mask(vol: ScalarVolume, cfg: PreprocessConfig) -> Mask:
    """Foreground extraction: threshold, largest 6-connected component,
    morphological closing, then per-axial-slice hole filling."""
    v = np.asarray(vol.values, dtype=np.float64)
    if cfg.mask_threshold_mode == "otsu":
        thr = otsu_threshold(v)
    else:
        thr = cfg.fixed_threshold
    fg = v > thr
    if not fg.any():
        raise ValueError("empty foreground after thresholding")

    structure = ndimage.generate_binary_structure(3, 1)  # 6-connectivity
    comp, ncomp = ndimage.label(fg, structure=structure)
    if ncomp > 1:
        sizes = ndimage.sum_labels(np.ones_like(comp), comp, index=np.arange(1, ncomp + 1))
        fg = comp == (1 + int(np.argmax(sizes)))

    if cfg.morph_radius > 0:
        r = cfg.morph_radius
        zz, yy, xx = np.mgrid[-r : r + 1, -r : r + 1, -r : r + 1]
        ball = xx**2 + yy**2 + zz**2 <= r**2
        fg = ndimage.binary_closing(fg, structure=ball)

    # fill interior holes slice by slice (axial = fixed z)
    for k in range(fg.shape[2]):
        fg[:, :, k] = ndimage.binary_fill_holes(fg[:, :, k])
    return Mask(vol.grid, fg)


def mask_background(vol: ScalarVolume, m: Mask) -> ScalarVolume:
    if not vol.grid.same_as(m.grid):
        raise GridMismatchError("volume and mask grids differ")
    return vol.with_values(np.where(m.bits, vol.values, 0.0))


# ---------------------------------------------------------------------------
# spatial initialization


def mask_boundary_points(m: Mask, max_points: int = ICP_MAX_BOUNDARY_POINTS) -> np.ndarray:
    """World-mm centers of set voxels with at least one unset 6-neighbor,
    deterministically strided down to at most ``max_points``."""
    bits = m.bits
    eroded = ndimage.binary_erosion(
        bits, structure=ndimage.generate_binary_structure(3, 1), border_value=0
    )
    surf = bits & ~eroded
    idx = np.argwhere(surf)
    if len(idx) == 0:
        raise ValueError("mask has no boundary voxels")
    if len(idx) > max_points:
        stride = int(np.ceil(len(idx) / max_points))
        idx = idx[::stride]
    return m.grid.world_from_index(idx.astype(np.float64))


def _procrustes_rigid(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rotation R and translation t with R @ src + t ~ dst."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    h = (src - mu_s).T @ (dst - mu_d)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return r, mu_d - r @ mu_s


def icp_rigid(
    moving_pts: np.ndarray,
    fixed_pts: np.ndarray,
    init: AffineTransform,
    max_iters: int = 50,
    tolerance: float = 0.01,
    rigid: bool = True,
) -> AffineTransform:
    """Iterative closest point from moving to fixed boundary points.

    Correspondences via a k-d tree; pose update by orthogonal Procrustes
    (or mean offset when ``rigid`` is False). Stops when the mean
    closest-point distance changes by less than ``tolerance`` mm.
    """
    tree = cKDTree(fixed_pts)
    r = init.matrix.copy()
    t = init.translation.copy()
    prev_mean = np.inf
    for _ in range(max_iters):
        moved = moving_pts @ r.T + t
        dists, nn = tree.query(moved)
        mean_d = float(dists.mean())
        if abs(prev_mean - mean_d) < tolerance:
            break
        prev_mean = mean_d
        target = fixed_pts[nn]
        if rigid:
            r, t = _procrustes_rigid(moving_pts, target)
        else:
            t = (target - moving_pts).mean(axis=0)
    return AffineTransform(r, t)


def com_init(fixed_mask: Mask, moving_mask: Mask, cfg: PreprocessConfig) -> AffineTransform:
    """Global initialization aligning the moving mask onto the fixed mask.

    Returns the forward map (moving space -> fixed space): the translation
    taking the moving center of mass to the fixed one, optionally refined by
    rigid ICP on the mask boundary point sets. Pull-back warping of the
    moving image uses the inverse of this transform.
    """
    com_f = center_of_mass(fixed_mask)
    com_m = center_of_mass(moving_mask)
    forward = AffineTransform.from_translation(com_f - com_m)
    if cfg.icp_enabled:
        try:
            fixed_pts = mask_boundary_points(fixed_mask)
            moving_pts = mask_boundary_points(moving_mask)
            forward = icp_rigid(
                moving_pts,
                fixed_pts,
                forward,
                max_iters=cfg.icp_max_iters,
                tolerance=cfg.icp_tolerance,
                rigid=cfg.icp_rigid,
            )
        except np.linalg.LinAlgError:
            warnings.warn("ICP refinement failed; keeping center-of-mass translation")
    return forward
