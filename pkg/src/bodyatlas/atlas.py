"""Atlas aggregation and unbiasing.

The initial anatomical atlas is the voxelwise mean of the warped subjects;
label atlases average warped soft indicator maps. Unbiasing resamples the
initial atlas through the mean of the inverted subject transforms.

All reductions run in ascending subject-id order so results are
bit-reproducible regardless of how the inputs were produced.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .transforms import (
    AffineTransform,
    DisplacementField,
    VelocityField,
    affine_invert,
    chain_to_field,
    exp_velocity,
    invert_displacement,
    warp_scalar,
)
from .volume import GridMismatchError, ImageGrid, ScalarVolume

INVERSION_RESIDUAL_LIMIT_VOXELS = 0.5


@dataclass(frozen=True)
class SubjectRegistration:
    """One subject's registered data in the reference space."""

    subject_id: str
    total_field: DisplacementField
    warped_image: ScalarVolume
    warped_soft_labels: dict[int, ScalarVolume] = field(default_factory=dict)
    affine: AffineTransform | None = None
    velocity: VelocityField | None = None


@dataclass
class CohortRegistration:
    reference_id: str
    subjects: list[SubjectRegistration]

    def __post_init__(self):
        if not self.subjects:
            raise ValueError("a cohort needs at least one subject")
        grid = self.grid
        for s in self.subjects:
            if not s.total_field.grid.same_as(grid) or not s.warped_image.grid.same_as(grid):
                raise GridMismatchError(f"subject {s.subject_id} is not on the reference grid")
        self.subjects = sorted(self.subjects, key=lambda s: s.subject_id)

    @property
    def grid(self) -> ImageGrid:
        return self.subjects[0].total_field.grid

    @property
    def n(self) -> int:
        return len(self.subjects)


@dataclass(frozen=True)
class AnatomicalAtlas:
    volume: ScalarVolume
    group: str
    n_subjects: int
    unbiased: bool = False


@dataclass(frozen=True)
class ProbabilityAtlas:
    structure: str
    volume: ScalarVolume
    group: str
    n_subjects: int
    unbiased: bool = False

    def __post_init__(self):
        v = self.volume.values
        if v.min() < -1e-6 or v.max() > 1.0 + 1e-6:
            raise ValueError("probability atlas values outside [0,1]")


@dataclass(frozen=True)
class MeanInverseField:
    field: DisplacementField
    n_subjects: int


def build_initial_atlas(reg: CohortRegistration, group: str = "") -> AnatomicalAtlas:
    """Voxelwise arithmetic mean of the warped subject images."""
    acc = np.zeros(reg.grid.dims, dtype=np.float64)
    for s in reg.subjects:
        acc += np.asarray(s.warped_image.values, dtype=np.float64)
    return AnatomicalAtlas(ScalarVolume(reg.grid, acc / reg.n), group, reg.n, unbiased=False)


def build_label_atlas(reg: CohortRegistration, label_id: int, structure: str, group: str = "") -> ProbabilityAtlas:
    """Mean of the warped soft indicator maps for one structure."""
    acc = np.zeros(reg.grid.dims, dtype=np.float64)
    for s in reg.subjects:
        if label_id not in s.warped_soft_labels:
            raise KeyError(f"subject {s.subject_id} has no soft map for label {label_id}")
        acc += np.asarray(s.warped_soft_labels[label_id].values, dtype=np.float64)
    mean = np.clip(acc / reg.n, 0.0, 1.0)
    return ProbabilityAtlas(structure, ScalarVolume(reg.grid, mean), group, reg.n, unbiased=False)


def subject_inverse_field(s: SubjectRegistration, grid: ImageGrid, include_affine: bool = True) -> tuple[DisplacementField, float]:
    """Dense inverse of a subject transform on the reference grid.

    With velocity/affine available, uses phi^-1 = exp(-v) o A^-1 (composed
    with the affine inverse only when ``include_affine``); otherwise falls
    back to fixed-point inversion of the total field. Returns the field and
    the inverse-consistency residual in mm.
    """
    if s.velocity is not None and s.affine is not None:
        u_neg = exp_velocity(s.velocity.negated(), grid)
        chain = [affine_invert(s.affine), u_neg] if include_affine else [u_neg]
        inv = chain_to_field(chain, grid)
    else:
        inv, _ = invert_displacement(s.total_field)
        if not include_affine:
            warnings.warn(
                f"subject {s.subject_id}: no decomposed transform; "
                "inverse includes the affine part"
            )
    # inverse-consistency: phi(phi^-1(x)) vs x
    pts = grid.voxel_centers()
    moved = pts + inv.sample(pts)
    back = moved + s.total_field.sample(moved)
    residual = float(np.abs(back - pts).max())
    return inv, residual


def mean_inverse_field(reg: CohortRegistration, include_affine: bool = True) -> MeanInverseField:
    """Componentwise mean of the subjects' inverse displacement fields.

    Subjects whose inverse-consistency residual exceeds half a voxel are
    excluded with a warning instead of corrupting the mean.
    """
    grid = reg.grid
    limit = INVERSION_RESIDUAL_LIMIT_VOXELS * min(grid.spacing)
    acc = np.zeros(grid.dims + (3,))
    used = 0
    for s in reg.subjects:
        inv, residual = subject_inverse_field(s, grid, include_affine=include_affine)
        if include_affine and residual > limit:
            warnings.warn(
                f"subject {s.subject_id}: inversion residual {residual:.3g} mm "
                f"exceeds {limit:.3g} mm; excluded from the mean inverse field"
            )
            continue
        acc += inv.vectors
        used += 1
    if used == 0:
        raise ValueError("no subject produced a usable inverse field")
    return MeanInverseField(DisplacementField(grid, acc / used), used)


def unbias(atlas, phi: MeanInverseField):
    """Resample an atlas through the mean inverse field (pull-back warp)."""
    if not atlas.volume.grid.same_as(phi.field.grid):
        raise GridMismatchError("atlas and mean inverse field grids differ")
    warped = warp_scalar(atlas.volume, [phi.field], atlas.volume.grid)
    if isinstance(atlas, ProbabilityAtlas):
        clipped = warped.with_values(np.clip(warped.values, 0.0, 1.0))
        return ProbabilityAtlas(atlas.structure, clipped, atlas.group, atlas.n_subjects, unbiased=True)
    return AnatomicalAtlas(warped, atlas.group, atlas.n_subjects, unbiased=True)
