"""Grid geometry, volume containers, and trilinear sampling."""

import numpy as np
import pytest

from bodyatlas.volume import (
    GridMismatchError,
    ImageGrid,
    LabelVolume,
    Mask,
    ScalarVolume,
    center_of_mass,
    downsample2,
    sample_nearest,
    sample_trilinear,
)


def _grid(dims=(6, 5, 4), spacing=(2.0, 1.5, 3.0), origin=(1.0, -2.0, 0.5)):
    return ImageGrid(dims, spacing, origin)


def test_world_index_round_trip():
    rng = np.random.default_rng(0)
    th = 0.4
    rot = np.array(
        [
            [np.cos(th), -np.sin(th), 0.0],
            [np.sin(th), np.cos(th), 0.0],
            [0.0, 0.0, 1.0],
        ]
    )
    grid = ImageGrid((7, 6, 5), (1.5, 2.0, 2.5), (3.0, -1.0, 2.0), rot)
    idx = rng.uniform(-1.0, 7.0, size=(200, 3))
    back = grid.index_from_world(grid.world_from_index(idx))
    assert np.abs(back - idx).max() < 1e-9


def test_voxel_centers_x_fastest():
    grid = _grid()
    pts = grid.voxel_centers()
    assert pts.shape == (grid.num_voxels, 3)
    # first axis varies fastest (Fortran voxel ordering)
    assert np.allclose(pts[1] - pts[0], [grid.spacing[0], 0.0, 0.0])
    # matches an explicit reshape of per-voxel values
    vals = np.arange(grid.num_voxels, dtype=float)
    shaped = vals.reshape(grid.dims, order="F")
    assert shaped[1, 0, 0] == 1.0


def test_grid_validation_rejects_bad_direction():
    with pytest.raises(ValueError):
        ImageGrid((4, 4, 4), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), np.ones((3, 3)))


def test_scalar_volume_freezes_and_casts():
    grid = _grid((3, 3, 3))
    vol = ScalarVolume(grid, np.ones(grid.dims, dtype=np.float32))
    assert vol.values.dtype == np.float64
    with pytest.raises(ValueError):
        vol.values[0, 0, 0] = 2.0


def test_scalar_volume_shape_mismatch():
    grid = _grid((3, 3, 3))
    with pytest.raises(ValueError):
        ScalarVolume(grid, np.zeros((3, 3, 4)))


def test_label_volume_ids_and_names():
    grid = _grid((3, 3, 3))
    lbl = np.zeros(grid.dims, dtype=np.int64)
    lbl[1, 1, 1] = 5
    lbl[0, 0, 0] = 2
    vol = LabelVolume(grid, lbl, {2: "a", 5: "b"})
    assert vol.ids() == [2, 5]


def test_mask_count():
    grid = _grid((3, 3, 3))
    bits = np.zeros(grid.dims, dtype=bool)
    bits[0, :, :] = True
    assert Mask(grid, bits).count == 9


def test_sample_trilinear_matches_manual_average():
    grid = ImageGrid((4, 4, 4), (1.0, 1.0, 1.0))
    vals = np.random.default_rng(1).standard_normal((4, 4, 4))
    vol = ScalarVolume(grid, vals)
    # midpoint of the first cell along x
    got = sample_trilinear(vol, np.array([[0.5, 0.0, 0.0]]))
    assert np.isclose(got[0], 0.5 * (vals[0, 0, 0] + vals[1, 0, 0]))


def test_sample_trilinear_zero_boundary_vanishes_far_outside():
    grid = ImageGrid((4, 4, 4), (1.0, 1.0, 1.0))
    vol = ScalarVolume(grid, np.ones((4, 4, 4)))
    got = sample_trilinear(vol, np.array([[-5.0, 0.0, 0.0], [0.0, 9.0, 0.0]]))
    assert np.all(got == 0.0)


def test_sample_trilinear_clamp_boundary_extends_edge():
    grid = ImageGrid((4, 4, 4), (1.0, 1.0, 1.0))
    vals = np.random.default_rng(2).standard_normal((4, 4, 4))
    vol = ScalarVolume(grid, vals)
    got = sample_trilinear(vol, np.array([[-5.0, 0.0, 0.0]]), boundary="clamp")
    assert np.isclose(got[0], vals[0, 0, 0])


def test_sample_nearest_picks_closest_voxel():
    grid = ImageGrid((3, 3, 3), (2.0, 2.0, 2.0))
    lbl = np.zeros((3, 3, 3), dtype=np.int64)
    lbl[2, 1, 0] = 7
    vol = LabelVolume(grid, lbl)
    got = sample_nearest(vol, np.array([[4.4, 1.7, 0.3]]))
    assert got[0] == 7


def test_downsample2_halves_dims_and_preserves_constants():
    grid = ImageGrid((4, 4, 4), (1.0, 1.0, 1.0))
    small = downsample2(ScalarVolume(grid, np.full((4, 4, 4), 3.25)))
    assert small.grid.dims == (2, 2, 2)
    assert np.allclose(small.grid.spacing, (2.0, 2.0, 2.0))
    assert np.allclose(small.values, 3.25)


def test_downsample2_odd_axis_rounds_up():
    grid = ImageGrid((5, 4, 4), (1.0, 1.0, 1.0))
    small = downsample2(ScalarVolume(grid, np.zeros((5, 4, 4))))
    assert small.grid.dims == (3, 2, 2)


def test_downsample2_grid_covers_same_extent():
    grid = ImageGrid((8, 8, 8), (1.0, 1.0, 1.0), (5.0, 5.0, 5.0))
    small = downsample2(ScalarVolume(grid, np.zeros((8, 8, 8))))
    # voxel centers shift by half the original spacing
    assert np.allclose(small.grid.origin, np.array(grid.origin) + 0.5)


def test_center_of_mass():
    grid = ImageGrid((5, 5, 5), (2.0, 2.0, 2.0))
    bits = np.zeros((5, 5, 5), dtype=bool)
    bits[1, 2, 3] = True
    bits[3, 2, 3] = True
    com = center_of_mass(Mask(grid, bits))
    assert np.allclose(com, [4.0, 4.0, 6.0])
