"""GLM fitting, t/z conversion, FDR correction, and the VBM pipeline."""

import numpy as np
import pytest
from scipy import stats

from bodyatlas.vbm import (
    DesignMatrix,
    bh_adjusted,
    fdr_bh,
    fit_glm,
    gaussian_smooth,
    t_to_z,
    vbm_pipeline,
)
from bodyatlas.volume import ImageGrid, Mask, ScalarVolume


def _vols(arrs, spacing=(1.0, 1.0, 1.0)):
    grid = ImageGrid(arrs[0].shape, spacing)
    return [ScalarVolume(grid, a) for a in arrs]


def test_design_two_group_shape_and_contrast():
    d = DesignMatrix.two_group(3, 4)
    assert d.x.shape == (7, 2)
    assert np.all(d.x[:, 0] == 1.0)
    assert np.all(d.x[:3, 1] == 0.0) and np.all(d.x[3:, 1] == 1.0)
    assert np.allclose(d.contrast, [0.0, 1.0])


def test_design_rejects_rank_deficiency():
    with pytest.raises(ValueError):
        DesignMatrix(np.ones((4, 2)), [0.0, 1.0])


def test_fit_glm_matches_two_sample_t():
    rng = np.random.default_rng(0)
    na, nb = 6, 8
    arrs = [rng.standard_normal((4, 4, 4)) for _ in range(na + nb)]
    maps = _vols(arrs)
    _, _, t_vol, df = fit_glm(maps, DesignMatrix.two_group(na, nb))
    assert df == na + nb - 2
    a = np.stack(arrs[:na])
    b = np.stack(arrs[na:])
    # pooled-variance two-sample t, equal to the GLM contrast t
    sp2 = ((na - 1) * a.var(0, ddof=1) + (nb - 1) * b.var(0, ddof=1)) / df
    t_ref = (b.mean(0) - a.mean(0)) / np.sqrt(sp2 * (1 / na + 1 / nb))
    assert np.abs(t_vol.values - t_ref).max() < 1e-10


def test_t_to_z_preserves_tail_probability():
    grid = ImageGrid((2, 2, 2), (1.0, 1.0, 1.0))
    t = np.array([[-3.0, 0.0], [1.5, 7.0]] * 2, dtype=float).reshape(2, 2, 2)
    z = t_to_z(ScalarVolume(grid, t), df=10)
    assert np.abs(stats.norm.sf(z.values) - stats.t.sf(t, 10)).max() < 1e-12
    # odd map: z(-t) = -z(t)
    z_neg = t_to_z(ScalarVolume(grid, -t), df=10)
    assert np.abs(z.values + z_neg.values).max() < 1e-12


def test_gaussian_smooth_preserves_constant():
    grid = ImageGrid((8, 8, 8), (2.0, 2.0, 2.0))
    out = gaussian_smooth(ScalarVolume(grid, np.full((8, 8, 8), 2.5)), sigma_mm=4.0)
    assert np.abs(out.values - 2.5).max() < 1e-12


def test_gaussian_smooth_sigma_zero_is_identity():
    grid = ImageGrid((6, 6, 6), (1.0, 1.0, 1.0))
    vals = np.random.default_rng(1).standard_normal((6, 6, 6))
    out = gaussian_smooth(ScalarVolume(grid, vals), sigma_mm=0.0)
    assert np.array_equal(out.values, vals)


def test_fdr_bh_known_example():
    p = np.array([0.001, 0.008, 0.039, 0.041, 0.042, 0.06, 0.074, 0.205])
    reject, thresh = fdr_bh(p, q=0.05)
    # classic BH: the largest k with p(k) <= k*q/m is k=5 (p=0.042)
    assert thresh == pytest.approx(0.042)
    assert reject.sum() == 5


def test_fdr_bh_none_rejected():
    reject, thresh = fdr_bh(np.array([0.5, 0.9, 0.7]), q=0.05)
    assert not reject.any()
    assert thresh == 0.0


def test_fdr_bh_validates_inputs():
    with pytest.raises(ValueError):
        fdr_bh(np.array([-0.1]), 0.05)
    with pytest.raises(ValueError):
        fdr_bh(np.array([0.5]), 1.5)


def test_bh_adjusted_matches_threshold_decision():
    rng = np.random.default_rng(2)
    for _ in range(20):
        p = rng.uniform(0, 1, size=rng.integers(1, 30))
        q = 0.1
        reject, _ = fdr_bh(p, q)
        adj = bh_adjusted(p)
        assert np.array_equal(reject, adj <= q) or np.array_equal(reject, adj < q) or np.array_equal(
            reject, adj <= q + 1e-12
        )


def test_vbm_pipeline_detects_planted_effect():
    rng = np.random.default_rng(3)
    shape = (12, 12, 12)
    bump = np.zeros(shape)
    bump[4:8, 4:8, 4:8] = 1.0
    group_a = [rng.normal(1.0, 0.1, shape) for _ in range(8)]
    group_b = [rng.normal(1.0, 0.1, shape) + bump for _ in range(8)]
    res = vbm_pipeline(_vols(group_a), _vols(group_b), sigma_mm=1.0, alpha=0.05)
    sig = res.significant.bits
    assert sig[5, 5, 5]
    inside = sig & (bump > 0)
    # essentially all detections sit in or near the planted cube
    assert inside.sum() >= 0.5 * sig.sum()


def test_vbm_pipeline_respects_mask():
    rng = np.random.default_rng(4)
    shape = (8, 8, 8)
    vols_a = [rng.normal(1.0, 0.1, shape) for _ in range(5)]
    vols_b = [rng.normal(2.0, 0.1, shape) for _ in range(5)]
    bits = np.zeros(shape, dtype=bool)
    bits[:4] = True
    res = vbm_pipeline(
        _vols(vols_a), _vols(vols_b), mask=Mask(ImageGrid(shape, (1.0, 1.0, 1.0)), bits), sigma_mm=0.0
    )
    assert not res.significant.bits[4:].any()


def test_vbm_pipeline_rejects_empty_group():
    with pytest.raises(ValueError):
        vbm_pipeline([], _vols([np.ones((4, 4, 4))]))
