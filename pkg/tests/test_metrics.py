"""Overlap and surface-distance metrics."""

import numpy as np
import pytest

from bodyatlas.metrics import (
    RegistrationReport,
    SubjectMetrics,
    dice,
    hd95,
    surface_voxels,
)
from bodyatlas.volume import GridMismatchError, ImageGrid, Mask


def _mask(bits, spacing=(1.0, 1.0, 1.0)):
    bits = np.asarray(bits, dtype=bool)
    return Mask(ImageGrid(bits.shape, spacing), bits)


def test_dice_identical_masks():
    bits = np.zeros((5, 5, 5), dtype=bool)
    bits[1:4, 1:4, 1:4] = True
    assert dice(_mask(bits), _mask(bits)) == 1.0


def test_dice_disjoint_masks():
    a = np.zeros((5, 5, 5), dtype=bool)
    b = np.zeros((5, 5, 5), dtype=bool)
    a[0, 0, 0] = True
    b[4, 4, 4] = True
    assert dice(_mask(a), _mask(b)) == 0.0


def test_dice_half_overlap():
    a = np.zeros((5, 5, 5), dtype=bool)
    b = np.zeros((5, 5, 5), dtype=bool)
    a[0, 0, 0] = a[0, 0, 1] = True
    b[0, 0, 1] = b[0, 0, 2] = True
    assert dice(_mask(a), _mask(b)) == 0.5


def test_dice_empty_masks_warns_and_returns_one():
    empty = np.zeros((3, 3, 3), dtype=bool)
    with pytest.warns(UserWarning):
        assert dice(_mask(empty), _mask(empty)) == 1.0


def test_dice_grid_mismatch():
    a = Mask(ImageGrid((3, 3, 3), (1.0, 1.0, 1.0)), np.zeros((3, 3, 3), dtype=bool))
    b = Mask(ImageGrid((3, 3, 3), (2.0, 2.0, 2.0)), np.zeros((3, 3, 3), dtype=bool))
    with pytest.raises(GridMismatchError):
        dice(a, b)


def test_surface_voxels_of_solid_block():
    bits = np.zeros((7, 7, 7), dtype=bool)
    bits[1:6, 1:6, 1:6] = True
    surf = surface_voxels(_mask(bits))
    # the 3^3 core is interior, everything else on the block is surface
    assert surf.sum() == 5**3 - 3**3
    assert not surf[3, 3, 3]


def test_hd95_identical_is_zero():
    bits = np.zeros((6, 6, 6), dtype=bool)
    bits[2:5, 2:5, 2:5] = True
    assert hd95(_mask(bits), _mask(bits)) == 0.0


def test_hd95_translated_points_spacing_scales():
    # two single-voxel masks 2 voxels apart; spacing converts to mm
    a = np.zeros((8, 8, 8), dtype=bool)
    b = np.zeros((8, 8, 8), dtype=bool)
    a[2, 4, 4] = True
    b[4, 4, 4] = True
    assert hd95(_mask(a, (5.0, 1.0, 1.0)), _mask(b, (5.0, 1.0, 1.0))) == 10.0


def test_hd95_empty_raises():
    full = np.ones((3, 3, 3), dtype=bool)
    empty = np.zeros((3, 3, 3), dtype=bool)
    with pytest.raises(ValueError):
        hd95(_mask(full), _mask(empty))


def test_hd95_max_directed_convention():
    a = np.zeros((8, 8, 8), dtype=bool)
    b = np.zeros((8, 8, 8), dtype=bool)
    a[2, 4, 4] = True
    b[4, 4, 4] = b[6, 4, 4] = True
    pooled = hd95(_mask(a), _mask(b), convention="pooled")
    directed = hd95(_mask(a), _mask(b), convention="max_directed")
    assert directed >= pooled


def test_registration_report_csv_round_trip(tmp_path):
    report = RegistrationReport(
        rows=[
            SubjectMetrics(
                subject_id="s0",
                stage="deformable",
                structure="liver",
                dice=0.95,
                hd95_mm=2.0,
                folding_ratio=0.0,
            )
        ]
    )
    path = tmp_path / "report.csv"
    report.write_csv(path)
    text = path.read_text()
    assert "s0" in text and "liver" in text and "deformable" in text
    summary = report.summary()
    assert summary[("deformable", "liver")]["dice_mean"] == pytest.approx(0.95)
    assert "deformable" in report.render_text()
