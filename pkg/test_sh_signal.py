import math

import numpy as np
import pytest

from dmri.data_types import DwiVolume, GradientScheme
from dmri.sh_signal import (RankDeficientFitError, ShBasisConfig, ShVolume, fit_sh, sample_neighborhood,
                            sample_neighborhoods, sh_basis_matrix)
from utils.errors import InputError


def _x_ramp(dims=(5, 5, 5)):
    """Single-coefficient volume whose value equals the voxel's x index."""
    coeffs = np.broadcast_to(np.arange(dims[0], dtype=np.float64)[:, None, None, None], dims + (1,))
    return ShVolume(coeffs.copy())


def test_coefficient_counts():
    assert ShBasisConfig(l_max=6).m == 28
    assert ShBasisConfig(l_max=2).m == 6
    assert ShBasisConfig.from_m(28).l_max == 6


@pytest.mark.parametrize("l_max", [-2, 3])
def test_invalid_l_max_rejected(l_max):
    with pytest.raises(InputError):
        ShBasisConfig(l_max=l_max)


def test_invalid_coefficient_count_rejected():
    with pytest.raises(InputError):
        ShBasisConfig.from_m(7)


def test_y00_is_constant():
    directions = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    basis = sh_basis_matrix(directions, ShBasisConfig(l_max=4))
    np.testing.assert_allclose(basis[:, 0], 0.28209479, atol=1e-8)


def test_basis_is_antipodally_symmetric():
    rng = np.random.default_rng(0)
    d = rng.normal(size=(10, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    config = ShBasisConfig(l_max=6)
    np.testing.assert_allclose(sh_basis_matrix(d, config), sh_basis_matrix(-d, config), atol=1e-12)


def test_non_unit_direction_rejected():
    with pytest.raises(InputError):
        sh_basis_matrix(np.array([[1.0, 1.0, 0.0]]), ShBasisConfig(l_max=2))


def test_constant_signal_fits_to_first_coefficient(scheme):
    dwi = DwiVolume(np.full((2, 2, 2, len(scheme)), 250.0), scheme)
    sh = fit_sh(dwi, config=ShBasisConfig(l_max=4))
    np.testing.assert_allclose(sh.coeffs[..., 0], 2.0 * math.sqrt(math.pi), rtol=1e-8)
    np.testing.assert_allclose(sh.coeffs[..., 1:], 0.0, atol=1e-8)


def test_representable_signal_is_recovered(scheme):
    config = ShBasisConfig(l_max=4)
    rng = np.random.default_rng(1)
    truth = rng.normal(size=config.m)
    data = np.empty((1, 1, 1, len(scheme)))
    data[0, 0, 0, scheme.b0_indices] = 1000.0
    data[0, 0, 0, scheme.dw_indices] = 1000.0 * sh_basis_matrix(scheme.bvecs[scheme.dw_indices], config) @ truth
    sh = fit_sh(DwiVolume(data, scheme), config=config)
    np.testing.assert_allclose(sh.coeffs[0, 0, 0], truth, atol=1e-8)


def test_background_voxel_is_flagged_and_zero(scheme):
    data = np.full((2, 1, 1, len(scheme)), 500.0)
    data[1] = 0.0
    sh = fit_sh(DwiVolume(data, scheme), config=ShBasisConfig(l_max=2))
    assert np.all(np.isfinite(sh.coeffs))
    np.testing.assert_array_equal(sh.coeffs[1, 0, 0], 0.0)
    assert sh.coeffs[0, 0, 0, 0] != 0.0


def test_too_few_directions_is_rank_deficient():
    dirs = np.eye(3)
    dirs = np.vstack([dirs, (dirs + np.roll(dirs, 1, axis=0)) / math.sqrt(2.0)])
    scheme = GradientScheme(bvals=np.r_[0.0, np.full(6, 1000.0)], bvecs=np.vstack([np.zeros(3), dirs]))
    dwi = DwiVolume(np.full((1, 1, 1, 7), 100.0), scheme)
    with pytest.raises(RankDeficientFitError, match="6 DW directions for 15 coefficients"):
        fit_sh(dwi, config=ShBasisConfig(l_max=4))
    sh = fit_sh(dwi, config=ShBasisConfig(l_max=4), reg=0.01)
    assert sh.m == 15


def test_negative_regularization_rejected(scheme):
    with pytest.raises(InputError):
        fit_sh(DwiVolume(np.ones((1, 1, 1, len(scheme))), scheme), reg=-1.0)


def test_neighborhood_block_layout_at_voxel_center():
    feature = sample_neighborhood(_x_ramp(), np.array([2.5, 2.5, 2.5]))
    assert feature.block.shape == (3, 3, 3, 1)
    assert not feature.out_of_bounds
    # [dz, dy, dx]: only dx changes the x index
    assert feature.block[1, 1, 0, 0] == pytest.approx(1.0)
    assert feature.block[1, 1, 2, 0] == pytest.approx(3.0)
    assert feature.block[0, 1, 1, 0] == pytest.approx(2.0)
    assert feature.block[2, 2, 1, 0] == pytest.approx(2.0)
    assert feature.flat().shape == (27,)


def test_neighborhood_interpolates_between_centers():
    feature = sample_neighborhood(_x_ramp(), np.array([2.0, 2.5, 2.5]))
    assert feature.block[1, 1, 1, 0] == pytest.approx(1.5)


def test_neighborhood_outside_cells_are_zero_and_flagged():
    feature = sample_neighborhood(_x_ramp(), np.array([0.5, 2.5, 2.5]))
    assert feature.out_of_bounds
    np.testing.assert_array_equal(feature.block[:, :, 0, 0], 0.0)
    assert feature.block[1, 1, 2, 0] == pytest.approx(1.0)


def test_batched_sampling_matches_single_point():
    sh = _x_ramp()
    points = np.array([[2.5, 2.5, 2.5], [1.2, 3.3, 2.9], [0.5, 0.5, 0.5]])
    blocks, oob = sample_neighborhoods(sh, points)
    assert blocks.shape == (3, 3, 3, 3, 1)
    np.testing.assert_array_equal(oob, [False, False, True])
    for i, p in enumerate(points):
        np.testing.assert_array_equal(blocks[i], sample_neighborhood(sh, p).block)


def test_sh_volume_rejects_bad_coefficient_count():
    with pytest.raises(InputError):
        ShVolume(np.zeros((2, 2, 2, 5)))
