"""Deterministic synthetic whole-body-like phantoms and cohorts.

A phantom is an ellipsoidal body with a subcutaneous fat shell, a few
visceral fat blobs, and five organ ellipsoids (liver, spleen, pancreas,
left/right kidney). Everything is a pure function of the spec, so outputs
are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .cohort import SubjectRecord
from .transforms import BSplineLattice, VelocityField, exp_velocity, folding_ratio, interior_mask
from .volume import ImageGrid, LabelVolume, ScalarVolume

LABEL_NAMES = {
    1: "subcutaneous_fat",
    2: "visceral_fat",
    3: "liver",
    4: "spleen",
    5: "pancreas",
    6: "kidney_left",
    7: "kidney_right",
}

# piecewise-constant tissue intensities; fat brightest, separation >= 5 noise sd
TISSUE_INTENSITY = {
    0: 0.0,   # background
    "body": 0.35,
    1: 0.95,
    2: 0.85,
    3: 0.55,  # liver
    4: 0.50,  # spleen
    5: 0.60,  # pancreas
    6: 0.45,  # kidneys
    7: 0.45,
}

DEFAULT_DIMS = (64, 48, 96)
DEFAULT_SPACING = (2.0, 3.0, 2.0)


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = DEFAULT_DIMS
    spacing: tuple[float, float, float] = DEFAULT_SPACING
    body_radii: tuple[float, float, float] = (52.0, 56.0, 86.0)  # mm
    shell_thickness: float = 10.0  # subcutaneous fat, mm
    visceral_blob_count: int = 3
    visceral_blob_radius: float = 8.0  # mm
    # organ centers are fractions of the body radii (kept well inside)
    organ_centers: dict[int, tuple[float, float, float]] = field(
        default_factory=lambda: {
            3: (0.35, 0.10, 0.30),    # liver
            4: (-0.40, 0.05, 0.25),   # spleen
            5: (-0.02, -0.18, 0.00),  # pancreas
            6: (-0.35, -0.10, -0.25), # kidney L
            7: (0.35, -0.10, -0.25),  # kidney R
        }
    )
    organ_radii: dict[int, tuple[float, float, float]] = field(
        default_factory=lambda: {
            3: (22.0, 18.0, 20.0),
            4: (12.0, 11.0, 13.0),
            5: (16.0, 8.0, 7.0),
            6: (9.0, 9.0, 14.0),
            7: (9.0, 9.0, 14.0),
        }
    )
    noise_sd: float = 0.01
    seed: int = 0

    def grid(self) -> ImageGrid:
        return ImageGrid(self.dims, self.spacing)

    def body_center(self) -> np.ndarray:
        g = self.grid()
        return g.world_from_index((np.array(self.dims) - 1) / 2.0)


def _ellipsoid_membership(pts: np.ndarray, center: np.ndarray, radii: np.ndarray) -> np.ndarray:
    return (((pts - center) / radii) ** 2).sum(axis=1) <= 1.0


def _validate_spec(spec: PhantomSpec):
    center = spec.body_center()
    body_r = np.asarray(spec.body_radii)
    inner_r = body_r - spec.shell_thickness
    organs = list(spec.organ_centers)
    for lid in organs:
        c = center + np.asarray(spec.organ_centers[lid]) * body_r
        r = np.asarray(spec.organ_radii[lid])
        # strictly inside the inner body (conservative bounding-box check)
        if np.any(np.abs(c - center) + r >= inner_r):
            raise ValueError(f"organ {LABEL_NAMES[lid]} is not strictly inside the body")
    for i, a in enumerate(organs):
        for b in organs[i + 1 :]:
            ca = center + np.asarray(spec.organ_centers[a]) * body_r
            cb = center + np.asarray(spec.organ_centers[b]) * body_r
            ra = np.asarray(spec.organ_radii[a])
            rb = np.asarray(spec.organ_radii[b])
            # ellipsoids separated if the gap exceeds the summed radii along
            # the center line (sufficient condition, checked per axis norm)
            d = np.linalg.norm(cb - ca)
            reach = np.linalg.norm(ra) / np.sqrt(3) + np.linalg.norm(rb) / np.sqrt(3)
            if d <= reach * 0.99:
                raise ValueError(f"organs {LABEL_NAMES[a]} and {LABEL_NAMES[b]} overlap")


def make_phantom(spec: PhantomSpec) -> tuple[ScalarVolume, LabelVolume]:
    """Render the phantom image (with seeded Gaussian noise) and label map."""
    _validate_spec(spec)
    grid = spec.grid()
    pts = grid.voxel_centers()
    center = spec.body_center()
    body_r = np.asarray(spec.body_radii)

    labels = np.zeros(len(pts), dtype=np.int64)
    intensity = np.zeros(len(pts))

    body = _ellipsoid_membership(pts, center, body_r)
    inner = _ellipsoid_membership(pts, center, body_r - spec.shell_thickness)
    intensity[body] = TISSUE_INTENSITY["body"]
    shell = body & ~inner
    labels[shell] = 1
    intensity[shell] = TISSUE_INTENSITY[1]

    rng = np.random.default_rng(spec.seed)
    # visceral blobs scattered in the mid-abdomen, clear of the organs
    blob_anchor = np.array([(0.0, 0.25, -0.05), (0.12, 0.3, 0.55), (-0.12, 0.3, -0.55),
                            (0.0, 0.35, 0.8), (0.0, 0.35, -0.8)])
    for i in range(spec.visceral_blob_count):
        frac = blob_anchor[i % len(blob_anchor)]
        c = center + frac * body_r + rng.normal(0.0, 1.0, 3)
        blob = _ellipsoid_membership(pts, c, np.full(3, spec.visceral_blob_radius)) & inner
        blob &= labels == 0
        labels[blob] = 2
        intensity[blob] = TISSUE_INTENSITY[2]

    for lid in sorted(spec.organ_centers):
        c = center + np.asarray(spec.organ_centers[lid]) * body_r
        organ = _ellipsoid_membership(pts, c, np.asarray(spec.organ_radii[lid]))
        labels[organ] = lid
        intensity[organ] = TISSUE_INTENSITY[lid]

    if spec.noise_sd > 0:
        intensity = intensity + rng.normal(0.0, spec.noise_sd, intensity.shape)

    image = ScalarVolume(grid, intensity.reshape(grid.dims, order="F"))
    label_vol = LabelVolume(grid, labels.reshape(grid.dims, order="F"), dict(LABEL_NAMES))
    return image, label_vol


def boundary_taper(lattice: BSplineLattice, grid: ImageGrid, ramp_mm: float) -> np.ndarray:
    """Per-control-point window fading a velocity lattice to zero at the
    domain boundary of ``grid``.

    With speed bounded by (distance to boundary) / ramp, the flow of the
    tapered velocity can never leave the domain, so its exponential (and the
    exponential of its negation) stay accurate right up to the edge.
    """
    lo = np.asarray(grid.origin, dtype=np.float64)
    hi = lo + (np.asarray(grid.dims) - 1.0) * np.asarray(grid.spacing)
    window = np.ones(lattice.control_dims)
    for ax in range(3):
        pos = lo[ax] + (np.arange(lattice.control_dims[ax]) - 1.0) * lattice.control_spacing[ax]
        t = np.clip(np.minimum(pos - lo[ax], hi[ax] - pos) / ramp_mm, 0.0, 1.0)
        sh = [1, 1, 1]
        sh[ax] = -1
        window = window * t.reshape(sh)
    return window


def random_smooth_warp(
    grid: ImageGrid,
    amplitude_voxels: float,
    smoothness_mm: float,
    seed: int,
    max_attempts: int = 5,
) -> VelocityField:
    """Seeded smooth random velocity whose flow has the requested maximum
    displacement (in voxels of ``grid``) and zero folding.

    The velocity lives on a coarse B-spline lattice (spacing = smoothness);
    it is rescaled until exp(v) hits the target amplitude, and shrunk and
    retried if folding appears.
    """
    if amplitude_voxels == 0:
        lattice = BSplineLattice.for_grid(grid, smoothness_mm)
        return VelocityField(lattice)
    rng = np.random.default_rng(seed)
    lattice = BSplineLattice.for_grid(grid, smoothness_mm)
    coef = rng.normal(0.0, 1.0, lattice.control_dims + (3,))
    target_mm = amplitude_voxels * min(grid.spacing)
    coef = coef * boundary_taper(lattice, grid, 2.0 * target_mm)[..., None]
    roi = interior_mask(grid)
    scale = 1.0
    for attempt in range(max_attempts):
        v = VelocityField(lattice.with_coefficients(coef * scale))
        disp = exp_velocity(v, grid)
        actual = disp.max_magnitude()
        if actual == 0:
            raise ValueError("degenerate random field")
        # linear correction toward the target amplitude
        if abs(actual - target_mm) / target_mm > 0.02:
            scale *= target_mm / actual
            v = VelocityField(lattice.with_coefficients(coef * scale))
            disp = exp_velocity(v, grid)
        if folding_ratio(disp, roi) == 0.0:
            return v
        scale *= 0.8
        target_mm *= 0.8
    raise ValueError(f"could not build a folding-free warp after {max_attempts} attempts")


def make_cohort(
    n: int,
    base_spec: PhantomSpec,
    variation: float,
    seed: int,
) -> list[tuple[ScalarVolume, LabelVolume, SubjectRecord]]:
    """n phantoms with seeded shape jitter and consistent synthetic phenotypes.

    ``variation`` scales the jitter: body radii sd = 2*variation mm, organ
    center sd = 1.5*variation mm, shell thickness sd = variation mm. BMI is a
    monotone function of the fat shell thickness.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    body_r = np.asarray(base_spec.body_radii)
    for i in range(n):
        # rejection-sample the jitter: a draw that pushes organs together or
        # outside the body is discarded and redrawn (still deterministic)
        for _ in range(50):
            radii = body_r + rng.normal(0.0, 2.0 * variation, 3)
            shell = max(base_spec.shell_thickness + rng.normal(0.0, variation), 4.0)
            centers = {}
            for lid, frac in base_spec.organ_centers.items():
                jitter_mm = rng.normal(0.0, 1.5 * variation, 3)
                centers[lid] = tuple(np.asarray(frac) + jitter_mm / radii)
            spec = replace(
                base_spec,
                body_radii=tuple(radii),
                shell_thickness=float(shell),
                organ_centers=centers,
                seed=int(rng.integers(0, 2**31 - 1)),
            )
            try:
                _validate_spec(spec)
                break
            except ValueError:
                continue
        else:
            raise ValueError(f"could not jitter subject {i} into a valid phantom")
        image, label_vol = make_phantom(spec)
        # phenotypes: bmi increases monotonically with the fat shell
        bmi = 20.0 + 0.9 * shell
        height = 170.0 + float(rng.normal(0.0, 5.0))
        weight = bmi * (height / 100.0) ** 2
        record = SubjectRecord(
            id=f"subj{i:03d}",
            sex="female" if i % 2 == 0 else "male",
            age=50.0 + float(rng.integers(0, 20)),
            height=height,
            weight=round(weight, 1),
            bmi=round(bmi, 2),
            body_fat=min(60.0, 15.0 + 1.8 * shell),
        )
        out.append((image, label_vol, record))
    return out
