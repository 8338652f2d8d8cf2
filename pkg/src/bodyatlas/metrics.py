"""Registration quality metrics (Dice, HD95) and cohort reporting."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import GridMismatchError, Mask

STAGES = ("pre-reg", "affine", "deformable")


def dice(a: Mask, b: Mask) -> float:
    """2|A n B| / (|A| + |B|); two empty masks count as perfect agreement."""
    if not a.grid.same_as(b.grid):
        raise GridMismatchError("dice inputs live on different grids")
    na, nb = a.count, b.count
    if na + nb == 0:
        warnings.warn("dice of two empty masks defined as 1.0")
        return 1.0
    inter = int((a.bits & b.bits).sum())
    return 2.0 * inter / (na + nb)


def surface_voxels(m: Mask) -> np.ndarray:
    """Boolean array marking set voxels with at least one unset 6-neighbor."""
    eroded = ndimage.binary_erosion(
        m.bits, structure=ndimage.generate_binary_structure(3, 1), border_value=0
    )
    return m.bits & ~eroded


def _directed_surface_distances(surf_from: np.ndarray, surf_to: np.ndarray, spacing) -> np.ndarray:
    """Euclidean mm distances from each voxel of surf_from to the nearest
    voxel of surf_to (exact distance transform between voxel centers)."""
    dt = ndimage.distance_transform_edt(~surf_to, sampling=spacing)
    return dt[surf_from]


def hd95(a: Mask, b: Mask, convention: str = "pooled") -> float:
    """95th percentile of surface-to-surface distances, in world mm.

    ``pooled`` (default) takes the percentile of both directed distance sets
    together; ``max_directed`` takes the max of the two directed percentiles.
    """
    if not a.grid.same_as(b.grid):
        raise GridMismatchError("hd95 inputs live on different grids")
    if a.count == 0 or b.count == 0:
        raise ValueError("hd95 needs two non-empty masks")
    sa = surface_voxels(a)
    sb = surface_voxels(b)
    spacing = a.grid.spacing
    d_ab = _directed_surface_distances(sa, sb, spacing)
    d_ba = _directed_surface_distances(sb, sa, spacing)
    if convention == "pooled":
        return float(np.percentile(np.concatenate([d_ab, d_ba]), 95))
    if convention == "max_directed":
        return float(max(np.percentile(d_ab, 95), np.percentile(d_ba, 95)))
    raise ValueError(f"unknown hd95 convention {convention!r}")


@dataclass(frozen=True)
class SubjectMetrics:
    subject_id: str
    stage: str
    structure: str
    dice: float
    hd95_mm: float
    folding_ratio: float | None = None


@dataclass
class RegistrationReport:
    """Per-stage, per-structure mean +/- sd summary of a cohort."""

    rows: list[SubjectMetrics]

    def summary(self) -> dict[tuple[str, str], dict[str, float]]:
        """(stage, structure) -> {dice_mean, dice_sd, hd95_mean, hd95_sd, n}.

        Uses the population (n-denominator) standard deviation. The 'mean'
        structure aggregates each subject's mean Dice over structures.
        """
        out: dict[tuple[str, str], dict[str, float]] = {}
        keys = sorted({(r.stage, r.structure) for r in self.rows})
        for key in keys:
            sel = [r for r in self.rows if (r.stage, r.structure) == key]
            dv = np.array([r.dice for r in sel])
            hv = np.array([r.hd95_mm for r in sel])
            out[key] = {
                "dice_mean": float(dv.mean()),
                "dice_sd": float(dv.std()),
                "hd95_mean": float(hv.mean()),
                "hd95_sd": float(hv.std()),
                "n": len(sel),
            }
        return out

    def folding_summary(self) -> dict[str, tuple[float, float]]:
        """stage -> (mean, sd) of folding ratios, where recorded."""
        out = {}
        for stage in sorted({r.stage for r in self.rows}):
            vals = np.array(
                [r.folding_ratio for r in self.rows if r.stage == stage and r.folding_ratio is not None]
            )
            if vals.size:
                out[stage] = (float(vals.mean()), float(vals.std()))
        return out

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["subject_id", "stage", "structure", "dice", "hd95_mm", "folding_ratio"])
            for r in sorted(self.rows, key=lambda r: (r.subject_id, r.stage, r.structure)):
                w.writerow(
                    [
                        r.subject_id, r.stage, r.structure,
                        f"{r.dice:.6f}", f"{r.hd95_mm:.6f}",
                        "" if r.folding_ratio is None else f"{r.folding_ratio:.6f}",
                    ]
                )

    def render_text(self) -> str:
        """Aligned per-stage/structure table, Table-3 style."""
        summ = self.summary()
        structures = sorted({k[1] for k in summ})
        lines = [f"{'stage':<12}" + "".join(f"{s:>22}" for s in structures)]
        for stage in STAGES:
            if not any(k[0] == stage for k in summ):
                continue
            cells = []
            for s in structures:
                r = summ.get((stage, s))
                cells.append(
                    f"{r['dice_mean']:.3f} +/- {r['dice_sd']:.3f}" if r else "-"
                )
            lines.append(f"{stage:<12}" + "".join(f"{c:>22}" for c in cells))
        fold = self.folding_summary()
        for stage, (m, sd) in fold.items():
            lines.append(f"folding[{stage}]: {m:.4f} +/- {sd:.4f}")
        return "\n".join(lines) + "\n"
