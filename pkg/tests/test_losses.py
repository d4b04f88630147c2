import numpy as np
import pytest
from skimage.metrics import structural_similarity

from gbr.errors import ConfigError, EmptyResultError
from gbr.geometry import CameraIntrinsics, CameraPose, DepthMap, NormalMap
from gbr.losses import (
    LossComponents,
    SupervisionConfig,
    cycle_loss,
    depth_gradient,
    depth_loss,
    depth_weights,
    fuse_pseudo_depth,
    interpolate_pose,
    normal_consistency,
    normal_loss,
    photometric_loss,
    ssim_map,
    total_loss,
)

K = CameraIntrinsics(60.0, 60.0, 15.5, 11.5, 32, 24)


def full(shape, value):
    return DepthMap(np.full(shape, float(value)), np.ones(shape, bool))


def test_depth_weights_range():
    w = depth_weights(np.array([1.0, 2.0, 11.0]), np.array([1.0, 1.0, 1.0]), beta=0.1)
    assert w.tolist() == pytest.approx([1.0, 1 / 1.1, 0.5])


def test_depth_loss_weighted_mean():
    D0 = full((1, 2), 1.0)
    Ds = DepthMap(np.array([[1.0, 2.0]]), np.ones((1, 2), bool))
    R = DepthMap(np.array([[1.5, 2.0]]), np.ones((1, 2), bool))
    # weights 1 and 1/1.1, errors 0.5 and 0
    assert depth_loss(Ds, D0, R) == pytest.approx(0.5 / (1 + 1 / 1.1))


def test_depth_loss_all_sky_is_empty():
    D = full((2, 2), 1.0)
    with pytest.raises(EmptyResultError):
        depth_loss(D, D, D, sky=np.ones((2, 2), bool))


def test_normal_consistency_of_constant_field_is_one():
    n = np.zeros((5, 5, 3))
    n[..., 2] = -1
    C = normal_consistency(NormalMap(n, np.ones((5, 5), bool)))
    assert np.allclose(C, 1.0)


def test_normal_loss_hand_value():
    a = np.zeros((3, 3, 3))
    a[..., 2] = 1
    b = a.copy()
    b[1, 1] = [1.0, 0, 0]
    Na, Nb = NormalMap(a, np.ones((3, 3), bool)), NormalMap(b, np.ones((3, 3), bool))
    w = (1 + normal_consistency(Nb)) / 2
    assert normal_loss(Na, Nb) == pytest.approx(2.0 * w[1, 1] / w.sum())


def test_depth_gradient_ramp_is_normalised():
    Z = np.tile(np.arange(1.0, 9.0) ** 2, (5, 1))
    g = depth_gradient(DepthMap(Z, np.ones_like(Z, bool)))
    assert g.max() == pytest.approx(1.0) and g[g > 0].min() >= 0
    assert np.all(depth_gradient(full((4, 4), 2.0)) == 0)


def test_ssim_matches_skimage_away_from_border(rng):
    a = rng.uniform(size=(40, 40))
    b = np.clip(a + 0.1 * rng.normal(size=a.shape), 0, 1)
    ours = ssim_map(a, b)
    _, ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=1.0, full=True)
    assert np.allclose(ours[5:-5, 5:-5], ref[5:-5, 5:-5], atol=1e-12)


def test_photometric_loss_hand_value(rng):
    a = rng.uniform(size=(12, 12, 3))
    assert photometric_loss(a, a) == pytest.approx(0.0, abs=1e-12)
    assert photometric_loss(a + 0.1, a, lam=0.0) == pytest.approx(0.1)
    with pytest.raises(ConfigError):
        photometric_loss(a, a[:, :5])


def test_total_loss_weights_and_pseudo_scale():
    cfg = SupervisionConfig()
    c = LossComponents(normal=1.0, depth=1.0, ndc=1.0, cycle=1.0, photometric=1.0)
    total, br = total_loss(c, cfg)
    assert total == pytest.approx(cfg.lambda1 + cfg.lambda2 + cfg.lambda3 + cfg.lambda4 + 1.0)
    ptotal, pbr = total_loss(c, cfg, is_pseudo=True)
    assert ptotal == pytest.approx(cfg.pseudo_weight * total) and pbr["scale"] == cfg.pseudo_weight


def test_interpolate_pose_midpoint():
    a = CameraPose.look_at([2.0, 0, 0], [0, 0, 0])
    b = CameraPose.look_at([0, 2.0, 0], [0, 0, 0])
    m = interpolate_pose(a, b, 0.5)
    assert np.allclose(m.center, [1.0, 1.0, 0])
    assert np.allclose(interpolate_pose(a, b, 0.0).rotation, a.rotation)
    assert np.allclose(interpolate_pose(a, b, 1.0).rotation, b.rotation)


def test_fuse_pseudo_depth_threshold():
    ref = full((1, 3), 1.0)
    s1 = DepthMap(np.array([[1.01, 1.5, 1.0]]), np.array([[True, True, False]]))
    D, count = fuse_pseudo_depth([s1], ref, eps=0.02)
    assert count.tolist() == [[2, 1, 1]]
    assert D.depth[0].tolist() == pytest.approx([1.005, 1.0, 1.0])


def test_cycle_loss_is_zero_for_consistent_plane():
    a = CameraPose.identity()
    b = CameraPose.from_center(np.eye(3), [0.1, 0.0, 0.0])
    Da = full(K.shape, 2.0)
    assert cycle_loss(Da, Da, K, a, K, b) < 1e-20


def test_cycle_loss_with_shifted_partner():
    # partner depth is 0.1 too far: the back-projected point drifts along b's ray
    a = CameraPose.identity()
    b = CameraPose.from_center(np.eye(3), [0.2, 0.0, 0.0])
    loss = cycle_loss(full(K.shape, 2.0), full(K.shape, 2.1), K, a, K, b)
    # a point on b's ray at depth 2.1 instead of 2.0 reprojects 0.2*fx*(1/2 - 1/2.1) px off in a
    expect = (0.2 * K.fx * (1 / 2.0 - 1 / 2.1)) ** 2
    assert loss == pytest.approx(expect, rel=1e-9)
