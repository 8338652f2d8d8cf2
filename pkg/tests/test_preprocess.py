"""Intensity normalization, body-mask extraction, and ICP initialization."""

import numpy as np
import pytest

from bodyatlas.preprocess import (
    PreprocessConfig,
    body_mask,
    com_init,
    contrast_clip,
    icp_rigid,
    mask_background,
    mask_boundary_points,
    min_max_normalize,
    otsu_threshold,
)
from bodyatlas.transforms import AffineTransform, affine_apply
from bodyatlas.volume import ImageGrid, Mask, ScalarVolume, center_of_mass


def _ball_volume(dims=(24, 24, 24), center=(12.0, 12.0, 12.0), radius=8.0, value=1.0):
    grid = ImageGrid(dims, (1.0, 1.0, 1.0))
    pts = grid.voxel_centers()
    inside = np.linalg.norm(pts - np.asarray(center), axis=1) <= radius
    vals = np.where(inside, value, 0.0).reshape(dims, order="F")
    return ScalarVolume(grid, vals), inside.reshape(dims, order="F")


def test_min_max_normalize_range():
    grid = ImageGrid((4, 4, 4), (1.0, 1.0, 1.0))
    vol = ScalarVolume(grid, np.random.default_rng(0).uniform(-5, 7, (4, 4, 4)))
    out = min_max_normalize(vol)
    assert out.values.min() == 0.0
    assert out.values.max() == 1.0


def test_min_max_normalize_constant_warns():
    grid = ImageGrid((4, 4, 4), (1.0, 1.0, 1.0))
    with pytest.warns(UserWarning):
        out = min_max_normalize(ScalarVolume(grid, np.full((4, 4, 4), 3.0)))
    assert np.all(out.values == 0.0)


def test_contrast_clip_saturates_outliers():
    grid = ImageGrid((10, 10, 10), (1.0, 1.0, 1.0))
    vals = np.zeros((10, 10, 10))
    vals[0, 0, 0] = 1000.0  # single outlier
    vals[1:, :, :] = np.random.default_rng(1).uniform(0, 1, (9, 10, 10))
    out = contrast_clip(ScalarVolume(grid, vals), 1.0, 99.0)
    assert out.values.max() == 1.0
    assert out.values.min() == 0.0
    # outlier is clipped to the top of the range, not beyond
    assert out.values[0, 0, 0] == 1.0


def test_contrast_clip_validates_order():
    grid = ImageGrid((4, 4, 4), (1.0, 1.0, 1.0))
    with pytest.raises(ValueError):
        contrast_clip(ScalarVolume(grid, np.zeros((4, 4, 4))), 99.0, 1.0)


def test_otsu_separates_bimodal():
    rng = np.random.default_rng(2)
    values = np.concatenate([rng.normal(0.1, 0.02, 4000), rng.normal(0.8, 0.02, 1000)])
    thr = otsu_threshold(values)
    assert 0.2 < thr < 0.7


def test_body_mask_recovers_ball():
    vol, inside = _ball_volume()
    m = body_mask(vol, PreprocessConfig())
    agreement = (m.bits == inside).mean()
    assert agreement > 0.99


def test_body_mask_drops_small_satellite():
    vol, inside = _ball_volume()
    vals = vol.values.copy()
    vals[0, 0, 0] = 1.0  # disconnected speck
    m = body_mask(vol.with_values(vals), PreprocessConfig(morph_radius=0))
    assert not m.bits[0, 0, 0]


def test_body_mask_fills_interior_holes():
    vol, inside = _ball_volume()
    vals = vol.values.copy()
    vals[12, 12, 12] = 0.0  # hollow center voxel
    m = body_mask(vol.with_values(vals), PreprocessConfig(morph_radius=0))
    assert m.bits[12, 12, 12]


def test_mask_background_zeroes_outside():
    vol, inside = _ball_volume(value=2.0)
    m = Mask(vol.grid, inside)
    out = mask_background(vol.with_values(np.full(vol.grid.dims, 5.0)), m)
    assert np.all(out.values[~inside] == 0.0)
    assert np.all(out.values[inside] == 5.0)


def test_mask_boundary_points_on_surface():
    vol, inside = _ball_volume()
    pts = mask_boundary_points(Mask(vol.grid, inside))
    r = np.linalg.norm(pts - 12.0, axis=1)
    assert np.all((r > 6.0) & (r < 9.5))


def test_icp_rigid_recovers_translation():
    rng = np.random.default_rng(3)
    pts = rng.uniform(0, 20, (400, 3))
    t_true = np.array([2.0, -1.0, 0.5])
    fixed = pts + t_true
    est = icp_rigid(pts, fixed, AffineTransform.identity(), tolerance=1e-9)
    moved = affine_apply(est, pts)
    assert np.abs(moved - fixed).max() < 1e-6


def test_com_init_is_forward_map():
    vol_f, inside_f = _ball_volume(center=(12.0, 12.0, 12.0))
    vol_m, inside_m = _ball_volume(center=(9.0, 12.0, 15.0))
    mf = Mask(vol_f.grid, inside_f)
    mm = Mask(vol_m.grid, inside_m)
    fwd = com_init(mf, mm, PreprocessConfig(icp_enabled=False))
    moved = affine_apply(fwd, center_of_mass(mm))
    assert np.abs(moved - center_of_mass(mf)).max() < 1e-9


def test_preprocess_config_validation():
    with pytest.raises(ValueError):
        PreprocessConfig(clip_low=50.0, clip_high=10.0)
    with pytest.raises(ValueError):
        PreprocessConfig(mask_threshold_mode="magic")
