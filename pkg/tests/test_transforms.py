"""Affine algebra, B-spline lattices, SVF exponentials, Jacobians, warps."""

import numpy as np
import pytest

from bodyatlas.transforms import (
    AffineTransform,
    BSplineLattice,
    DisplacementField,
    VelocityField,
    affine_apply,
    affine_compose,
    affine_invert,
    chain_points,
    chain_to_field,
    compose,
    exp_velocity,
    folding_ratio,
    interior_mask,
    invert_displacement,
    jacobian_det,
    load_affine,
    save_affine,
    squaring_steps,
    warp_labels,
    warp_scalar,
)
from bodyatlas.volume import ImageGrid, LabelVolume, Mask, ScalarVolume


def _grid(dims=(12, 10, 8), spacing=(2.0, 2.0, 2.0)):
    return ImageGrid(dims, spacing)


# -- affine -----------------------------------------------------------------


def test_affine_invert_round_trip():
    rng = np.random.default_rng(0)
    a = AffineTransform(np.eye(3) + 0.1 * rng.standard_normal((3, 3)), rng.standard_normal(3))
    p = rng.standard_normal((50, 3))
    back = affine_apply(affine_invert(a), affine_apply(a, p))
    assert np.abs(back - p).max() < 1e-12


def test_affine_compose_order():
    a = AffineTransform(2.0 * np.eye(3), np.zeros(3))
    b = AffineTransform.from_translation([1.0, 0.0, 0.0])
    # (a o b)(x) = a(b(x))
    got = affine_apply(affine_compose(a, b), np.array([[0.0, 0.0, 0.0]]))
    assert np.allclose(got, [[2.0, 0.0, 0.0]])


def test_affine_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    a = AffineTransform(np.eye(3) + 0.05 * rng.standard_normal((3, 3)), rng.standard_normal(3))
    path = tmp_path / "a.txt"
    save_affine(a, path)
    b = load_affine(path)
    assert np.allclose(a.matrix, b.matrix)
    assert np.allclose(a.translation, b.translation)


def test_affine_rejects_singular_matrix():
    with pytest.raises(ValueError):
        AffineTransform(np.zeros((3, 3)), np.zeros(3))


# -- B-spline lattice ---------------------------------------------------------


def test_lattice_partition_of_unity():
    grid = _grid()
    lat = BSplineLattice.for_grid(grid, 8.0)
    const = np.array([2.0, -1.0, 0.5])
    lat = lat.with_coefficients(np.tile(const, lat.control_dims + (1,)))
    rng = np.random.default_rng(2)
    pts = rng.uniform(0.0, 14.0, size=(300, 3))
    assert np.abs(lat.evaluate(pts) - const).max() < 1e-12


def test_lattice_evaluate_on_grid_matches_pointwise():
    grid = _grid((8, 7, 6))
    lat = BSplineLattice.for_grid(grid, 6.0)
    rng = np.random.default_rng(3)
    lat = lat.with_coefficients(rng.standard_normal(lat.control_dims + (3,)))
    dense = lat.evaluate_on_grid(grid).reshape(-1, 3, order="F")
    pointwise = lat.evaluate(grid.voxel_centers())
    assert np.abs(dense - pointwise).max() < 1e-10


def test_project_gradient_is_adjoint_of_evaluate_on_grid():
    grid = _grid((8, 7, 6))
    lat = BSplineLattice.for_grid(grid, 6.0)
    rng = np.random.default_rng(4)
    coef = rng.standard_normal(lat.control_dims + (3,))
    voxel_grad = rng.standard_normal(grid.dims + (3,)).reshape(-1, 3, order="F")
    # <evaluate(coef), g> == <coef, project(g)> for linear maps
    lhs = np.sum(
        lat.with_coefficients(coef).evaluate_on_grid(grid).reshape(-1, 3, order="F") * voxel_grad
    )
    rhs = np.sum(coef * lat.project_gradient(grid, voxel_grad))
    assert abs(lhs - rhs) < 1e-8 * max(1.0, abs(lhs))


# -- exponential --------------------------------------------------------------


def test_exp_of_constant_velocity_is_translation():
    grid = _grid()
    lat = BSplineLattice.for_grid(grid, 8.0)
    t = np.array([3.0, -1.0, 2.0])
    lat = lat.with_coefficients(np.tile(t, lat.control_dims + (1,)))
    d = exp_velocity(VelocityField(lat), grid)
    assert np.abs(d.vectors - t).max() < 1e-9


def test_exp_zero_velocity_is_identity():
    grid = _grid()
    lat = BSplineLattice.for_grid(grid, 8.0)
    d = exp_velocity(VelocityField(lat), grid)
    assert d.max_magnitude() == 0.0


def test_squaring_steps_rule():
    grid = ImageGrid((8, 8, 8), (2.0, 2.0, 2.0))
    assert squaring_steps(0.0, grid) == 0
    # small velocities below the step limit need no squaring
    assert squaring_steps(0.5, grid) == 0
    n1 = squaring_steps(8.0, grid)
    n2 = squaring_steps(16.0, grid)
    assert n2 == n1 + 1


def test_compose_with_zero_is_identity_on_field():
    grid = _grid((8, 8, 8))
    rng = np.random.default_rng(5)
    u = DisplacementField(grid, rng.standard_normal(grid.dims + (3,)))
    z = DisplacementField.zero(grid)
    assert np.abs(compose(u, z).vectors - u.vectors).max() < 1e-12


def test_invert_displacement_round_trip():
    grid = _grid((16, 16, 16))
    lat = BSplineLattice.for_grid(grid, 16.0)
    rng = np.random.default_rng(6)
    lat = lat.with_coefficients(2.0 * rng.standard_normal(lat.control_dims + (3,)))
    d = exp_velocity(VelocityField(lat), grid)
    inv, resid = invert_displacement(d)
    interior = interior_mask(grid, margin=3).bits
    round_trip = compose(d, inv).vectors[interior]
    assert np.linalg.norm(round_trip, axis=-1).max() < 0.3 * min(grid.spacing)


# -- Jacobian / folding -------------------------------------------------------


def test_jacobian_det_identity_is_one():
    grid = _grid()
    det = jacobian_det(DisplacementField.zero(grid))
    assert np.abs(det.values - 1.0).max() < 1e-12


def test_jacobian_det_linear_field():
    grid = _grid((10, 10, 10))
    alpha = 0.05
    pts = grid.voxel_centers()
    vec = (alpha * pts).reshape(grid.dims + (3,), order="F")
    det = jacobian_det(DisplacementField(grid, vec))
    interior = interior_mask(grid).bits
    assert np.abs(det.values[interior] - (1.0 + alpha) ** 3).max() < 1e-9


def test_folding_ratio_flags_reflection():
    grid = _grid((10, 10, 10))
    pts = grid.voxel_centers()
    # u(x) = -2x folds everything: x + u(x) = -x
    vec = (-2.0 * pts).reshape(grid.dims + (3,), order="F")
    assert folding_ratio(DisplacementField(grid, vec)) == 1.0
    assert folding_ratio(DisplacementField.zero(grid)) == 0.0


# -- chains and warps ---------------------------------------------------------


def test_chain_points_applies_left_to_right():
    a = AffineTransform.from_translation([1.0, 0.0, 0.0])
    b = AffineTransform(2.0 * np.eye(3), np.zeros(3))
    p = np.zeros((1, 3))
    got = chain_points([a, b], p)
    # a first, then b
    assert np.allclose(got, [[2.0, 0.0, 0.0]])


def test_chain_to_field_matches_chain_points():
    grid = _grid((6, 6, 6))
    a = AffineTransform.from_translation([2.0, -1.0, 0.5])
    field = chain_to_field([a], grid)
    pts = grid.voxel_centers()
    assert np.abs(field.apply(pts) - chain_points([a], pts)).max() < 1e-10


def test_warp_scalar_translation_shifts_values():
    grid = ImageGrid((8, 8, 8), (1.0, 1.0, 1.0))
    vals = np.zeros((8, 8, 8))
    vals[4, 4, 4] = 1.0
    vol = ScalarVolume(grid, vals)
    # pull-back by +x translation moves content one voxel toward -x
    shift = AffineTransform.from_translation([1.0, 0.0, 0.0])
    out = warp_scalar(vol, [shift], grid)
    assert np.isclose(out.values[3, 4, 4], 1.0)


def test_warp_labels_returns_hard_and_soft():
    grid = ImageGrid((8, 8, 8), (1.0, 1.0, 1.0))
    lbl = np.zeros((8, 8, 8), dtype=np.int64)
    lbl[2:6, 2:6, 2:6] = 3
    vol = LabelVolume(grid, lbl, {3: "organ"})
    hard, soft = warp_labels(vol, [AffineTransform.identity()], grid)
    assert set(np.unique(hard.labels)) == {0, 3}
    assert 3 in soft
    assert np.abs(soft[3].values - (lbl == 3)).max() < 1e-12
