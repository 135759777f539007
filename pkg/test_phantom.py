import math

import numpy as np
import pytest

from dmri.data_types import GradientScheme
from dmri.phantom import (ArcSpec, BundleGeometryError, BundleSpec, TensorModelParams, build_phantom,
                          electrostatic_directions, generate_gt_tractogram, load_phantom_spec, phantom_from_spec,
                          simulate_dwi)
from utils.errors import InputError

AXIS_SCHEME = GradientScheme(bvals=np.array([0.0, 1000.0, 1000.0]),
                             bvecs=np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))


def test_tiny_phantom_layout(tiny_phantom):
    assert tiny_phantom.dims == (16, 12, 12)
    assert tiny_phantom.bundle_names == ["straight"]
    head, tail = tiny_phantom.head_rois[0], tiny_phantom.tail_rois[0]
    assert head.any() and tail.any()
    assert not np.any(head & tail)
    np.testing.assert_array_equal(tiny_phantom.wm_mask, tiny_phantom.bundle_masks[0])
    np.testing.assert_allclose(tiny_phantom.orientations[8, 5, 5, 0], [1.0, 0.0, 0.0])
    assert tiny_phantom.fractions[8, 5, 5, 0] == pytest.approx(1.0)
    assert tiny_phantom.fractions[0, 0, 0, 0] == 0.0


def test_noiseless_single_fiber_signal(tiny_phantom):
    dwi = simulate_dwi(tiny_phantom, AXIS_SCHEME, snr=None)
    s0 = TensorModelParams().s0
    voxel = dwi.data[8, 5, 5]
    assert voxel[0] == pytest.approx(s0)
    assert voxel[1] / s0 == pytest.approx(math.exp(-1.7), rel=1e-9)
    assert voxel[2] / s0 == pytest.approx(math.exp(-0.3), rel=1e-9)
    assert voxel[1] / s0 == pytest.approx(0.1827, abs=1e-4)
    assert voxel[2] / s0 == pytest.approx(0.7408, abs=1e-4)


def test_background_signal_is_isotropic(tiny_phantom):
    dwi = simulate_dwi(tiny_phantom, AXIS_SCHEME, snr=None)
    params = TensorModelParams()
    expected = params.s0 * math.exp(-1000.0 * params.mean_diffusivity)
    np.testing.assert_allclose(dwi.data[0, 0, 0, 1:], expected)


def test_rician_noise_is_seeded_and_non_negative(tiny_phantom, scheme):
    a = simulate_dwi(tiny_phantom, scheme, snr=20.0, seed=3)
    b = simulate_dwi(tiny_phantom, scheme, snr=20.0, seed=3)
    c = simulate_dwi(tiny_phantom, scheme, snr=20.0, seed=4)
    np.testing.assert_array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)
    assert np.all(a.data >= 0.0)


def test_signal_is_antipodally_symmetric():
    phantom = phantom_from_spec(load_phantom_spec("default"))
    directions = electrostatic_directions(6, iterations=50)
    paired = GradientScheme(bvals=np.array([0.0] + [1000.0] * 12),
                            bvecs=np.vstack([np.zeros((1, 3)), directions, -directions]))
    data = simulate_dwi(phantom, paired, snr=None).data
    np.testing.assert_allclose(data[..., 1:7], data[..., 7:], rtol=1e-12)


def test_single_fiber_signal_is_lowest_along_the_fiber(scheme):
    phantom = phantom_from_spec(load_phantom_spec("default"))
    dw = scheme.bvals > 0
    data = simulate_dwi(phantom, scheme, snr=None).data[..., dw]
    single = phantom.wm_mask & np.isclose(phantom.fractions.max(axis=-1), 1.0)
    assert single.any()
    dominant = np.argmax(phantom.fractions[single], axis=-1)
    orientations = phantom.orientations[single][np.arange(dominant.size), dominant]
    cos2 = (orientations @ scheme.bvecs[dw].T) ** 2
    lowest = np.argmin(data[single], axis=-1)
    np.testing.assert_allclose(cos2[np.arange(lowest.size), lowest], cos2.max(axis=-1), atol=1e-12)


def _crossing_phantom():
    along_x = BundleSpec(name="x", points=[(2.0, 10.5, 10.5), (18.0, 10.5, 10.5)], radius=2.0)
    along_y = BundleSpec(name="y", points=[(10.5, 2.0, 10.5), (10.5, 18.0, 10.5)], radius=2.0)
    return build_phantom([along_x, along_y], dims=(20, 20, 20), voxel_size=(1.0, 1.0, 1.0))


def test_right_angle_crossing_splits_fractions():
    phantom = _crossing_phantom()
    np.testing.assert_allclose(phantom.fractions[10, 10, 10], [0.5, 0.5])
    np.testing.assert_allclose(phantom.orientations[10, 10, 10], [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    np.testing.assert_allclose(phantom.fractions[4, 10, 10], [1.0, 0.0])
    s0 = TensorModelParams().s0
    signal = simulate_dwi(phantom, AXIS_SCHEME, snr=None).data[10, 10, 10]
    both = 0.5 * (math.exp(-1.7) + math.exp(-0.3))
    np.testing.assert_allclose(signal[1:] / s0, [both, both], rtol=1e-9)


@pytest.mark.parametrize("make_phantom", [
    lambda tiny: tiny,
    lambda tiny: _crossing_phantom(),
])
def test_ground_truth_points_stay_in_white_matter(tiny_phantom, make_phantom):
    phantom = make_phantom(tiny_phantom)
    gt = generate_gt_tractogram(phantom, streamlines_per_bundle=5, seed=2).tractogram
    assert gt.bundle_names() == sorted(phantom.bundle_names)
    for line in gt:
        voxels = np.floor(line).astype(int)
        assert phantom.wm_mask[tuple(voxels.T)].all()


def test_unreachable_head_roi_fails_instead_of_spinning():
    spec = BundleSpec(name="diagonal", points=[(3.0, 7.0, 3.0), (7.0, 3.0, 3.0)], radius=0.8)
    phantom = build_phantom([spec], dims=(10, 10, 8), voxel_size=(1.0, 1.0, 1.0))
    assert phantom.head_rois[0].any()
    assert not phantom.wm_mask[3, 7, 3]
    with pytest.raises(BundleGeometryError, match="diagonal"):
        generate_gt_tractogram(phantom, streamlines_per_bundle=5, seed=0, seed_jitter=0.0)

def test_non_positive_snr_rejected(tiny_phantom, scheme):
    with pytest.raises(InputError):
        simulate_dwi(tiny_phantom, scheme, snr=0.0)


def test_ground_truth_runs_head_to_tail(tiny_phantom):
    result = generate_gt_tractogram(tiny_phantom, step=1.0, streamlines_per_bundle=10, seed=0)
    gt = result.tractogram
    assert len(gt) == 10
    assert result.accepted == {"straight": 10}
    assert result.discarded == {"straight": 0}
    assert gt.labels == ["straight"] * 10
    head, tail = tiny_phantom.head_rois[0], tiny_phantom.tail_rois[0]
    for line in gt:
        assert head[tuple(np.floor(line[0]).astype(int))]
        assert tail[tuple(np.floor(line[-1]).astype(int))]
        np.testing.assert_allclose(np.linalg.norm(np.diff(line, axis=0), axis=1), 1.0)


def test_ground_truth_is_seeded(tiny_phantom):
    a = generate_gt_tractogram(tiny_phantom, streamlines_per_bundle=3, seed=5).tractogram
    b = generate_gt_tractogram(tiny_phantom, streamlines_per_bundle=3, seed=5).tractogram
    for la, lb in zip(a, b):
        np.testing.assert_array_equal(la, lb)


def test_arc_bundle_follows_its_tangent():
    spec = BundleSpec(name="arc", shape="arc", radius=1.5,
                      arc=ArcSpec(center=(10.0, 10.0, 10.0), radius=6.0, start_deg=0.0, end_deg=90.0))
    phantom = build_phantom([spec], dims=(20, 20, 20), voxel_size=(1.0, 1.0, 1.0))
    tangent = np.array([-1.0, 1.0, 0.0]) / math.sqrt(2.0)
    assert phantom.wm_mask[14, 14, 9]
    assert abs(phantom.orientations[14, 14, 9, 0] @ tangent) > 0.99

    theta = np.linspace(0.0, math.pi / 2.0, 181)
    on_arc = np.stack([10.0 + 6.0 * np.cos(theta), 10.0 + 6.0 * np.sin(theta), np.full_like(theta, 10.0)], axis=1)
    expected = np.stack([-np.sin(theta), np.cos(theta), np.zeros_like(theta)], axis=1)
    _, dist, tangents = phantom.centerlines[0].closest(on_arc)
    np.testing.assert_allclose(dist, 0.0, atol=1e-9)
    np.testing.assert_allclose(tangents, expected, atol=1e-3)

    voxels = np.argwhere(phantom.wm_mask)
    centers = voxels + 0.5
    psi = np.clip(np.arctan2(centers[:, 1] - 10.0, centers[:, 0] - 10.0), 0.0, math.pi / 2.0)
    expected = np.stack([-np.sin(psi), np.cos(psi), np.zeros_like(psi)], axis=1)
    np.testing.assert_allclose(phantom.orientations[tuple(voxels.T)][:, 0], expected, atol=1e-3)


def test_bundle_leaving_volume_rejected():
    spec = BundleSpec(name="long", points=[(1.0, 5.0, 5.0), (30.0, 5.0, 5.0)], radius=1.0)
    with pytest.raises(BundleGeometryError, match="long"):
        build_phantom([spec], dims=(10, 10, 10), voxel_size=(1.0, 1.0, 1.0))


def test_duplicate_bundle_names_rejected():
    spec = BundleSpec(name="a", points=[(3.0, 5.0, 5.0), (12.0, 5.0, 5.0)], radius=1.0)
    with pytest.raises(InputError):
        build_phantom([spec, spec], dims=(16, 10, 10), voxel_size=(1.0, 1.0, 1.0))


def test_polyline_needs_two_points():
    with pytest.raises(ValueError):
        BundleSpec(name="a", points=[(3.0, 5.0, 5.0)], radius=1.0)


def test_unknown_template_lists_available():
    with pytest.raises(InputError, match="tiny"):
        load_phantom_spec("does_not_exist")


def test_template_overrides_apply():
    spec = load_phantom_spec("tiny", roi_radius=1.5, dims=None)
    assert spec.roi_radius == 1.5
    assert spec.dims == (16, 12, 12)


def test_default_template_builds():
    phantom = phantom_from_spec(load_phantom_spec("default"))
    assert phantom.bundle_names == ["straight", "oblique", "arc"]
    assert phantom.fractions.sum(axis=-1).max() == pytest.approx(1.0)


def test_electrostatic_directions_are_unit_and_upper_hemisphere():
    d = electrostatic_directions(16, iterations=100)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0)
    assert np.all(d[:, 2] >= 0.0)
    np.testing.assert_array_equal(d, electrostatic_directions(16, iterations=100))
