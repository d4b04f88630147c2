import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gbr.ba.align import estimate_focal
from gbr.ba.bundle import bundle_adjust, huber_cost, reprojection_rmse
from gbr.ba.local import cluster_residuals, hull_mask, rigid_align
from gbr.ba.matching import brute_force_reciprocal, reciprocal_nearest_neighbors
from gbr.errors import NumericalError
from gbr.geometry import CameraIntrinsics, CameraPose, PointMapFrame, SimilarityTransform, depth_to_points

from helpers import ate_of, exact_tracks, perturb_poses, rig_from, sphere_points


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 40), st.integers(0, 40), st.integers(0, 2**31 - 1))
def test_reciprocal_neighbours_match_brute_force(n, m, seed):
    rng = np.random.default_rng(seed)
    A, B = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
    i, j = reciprocal_nearest_neighbors(A, B)
    bi, bj = brute_force_reciprocal(A, B) if n and m else (i, j)
    assert np.array_equal(i, bi) and np.array_equal(j, bj)


def test_reciprocal_pairs_are_one_to_one(rng):
    A = rng.normal(size=(200, 3))
    i, j = reciprocal_nearest_neighbors(A, A + 1e-4 * rng.normal(size=A.shape))
    assert len(i) == 200 and np.array_equal(i, j)


def test_huber_cost_branches():
    r = np.array([0.5, 3.0])
    assert huber_cost(r, 2.0).tolist() == [0.125, 2.0 * 3.0 - 2.0]
    assert huber_cost(r, None).tolist() == [0.125, 4.5]


def test_rigid_align_recovers_motion(rng):
    from scipy.spatial.transform import Rotation

    X = rng.normal(size=(20, 3))
    T = SimilarityTransform(scale=1.0, rotation=Rotation.random(random_state=rng).as_matrix(), translation=rng.normal(size=3))
    est = rigid_align(X, T.apply(X))
    assert np.allclose(est.apply(X), T.apply(X))
    with pytest.raises(NumericalError):
        rigid_align(X[:2], X[:2])


def test_hull_mask_square():
    px = np.array([[2.0, 2.0], [7.0, 2.0], [7.0, 7.0], [2.0, 7.0]])
    m = hull_mask(px, (10, 10), dilation=0)
    assert m[2:8, 2:8].all() and m.sum() == 36
    assert hull_mask(px, (10, 10), dilation=1).sum() > 36
    assert not hull_mask(np.zeros((0, 2)), (4, 4)).any()


def test_cluster_residuals_finds_planted_blob(rng):
    pts = rng.uniform(-1, 1, size=(2000, 3))
    res = 0.01 * rng.uniform(size=2000)
    blob = np.linalg.norm(pts - [0.5, 0.5, 0.5], axis=1) < 0.25
    res[blob] = 1.0
    labels, thr, eps = cluster_residuals(pts, res, percentile=100 * (1 - blob.mean()) - 0.5, min_samples=3)
    assert thr < 1.0
    hit = labels >= 0
    assert hit[blob].mean() > 0.9 and not hit[~blob].any()


def _ring(n=5, f=80.0):
    K = CameraIntrinsics.centered(f, 64, 48)
    cams = []
    for a in np.linspace(0, 2 * np.pi, n, endpoint=False):
        cams.append((K, CameraPose.look_at([3 * np.cos(a), 3 * np.sin(a), 0.3], [0, 0, 0])))
    return cams


def test_small_bundle_adjustment_converges():
    # two-view tracks leave one free scale per pair, so every track spans three views
    cams = _ring(10)
    m = exact_tracks(sphere_points(400, seed=3), cams, min_views=3)
    poses = perturb_poses([P for _, P in cams], seed=1)
    rig = rig_from([(K, P) for (K, _), P in zip(cams, poses)])
    rig2, X, rep = bundle_adjust(m, rig, huber_delta=None)
    assert reprojection_rmse(m, rig2, X) < 1e-8
    assert ate_of(rig2.centers, [P.center for _, P in cams]) < 1e-8
    assert rep.final_cost <= rep.initial_cost


def test_points_only_mode_keeps_cameras():
    cams = _ring()
    m = exact_tracks(sphere_points(200, seed=4), cams)
    rig = rig_from(cams)
    rig2, X, _ = bundle_adjust(m, rig, points=m.points + 0.01, mode="points_only")
    assert all(np.array_equal(a.rotation, b.rotation) for a, b in zip(rig.poses, rig2.poses))
    assert np.allclose(X, m.points, atol=1e-7)


def test_underdetermined_problem_is_rejected():
    cams = _ring()
    m = exact_tracks(sphere_points(400, seed=3), cams).subset(np.arange(3))
    with pytest.raises(NumericalError, match="underdetermined"):
        bundle_adjust(m, rig_from(cams))


def test_focal_estimate_from_exact_point_map():
    K = CameraIntrinsics.centered(93.0, 64, 48)
    from gbr.geometry import DepthMap

    D = DepthMap(np.full(K.shape, 2.0) + 0.1 * np.arange(64)[None, :] / 64, np.ones(K.shape, bool))
    frame = PointMapFrame(depth_to_points(D, K), np.ones(K.shape), 0, 0)
    est = estimate_focal(frame, principal_point=(K.cx, K.cy))
    assert est.focal == pytest.approx(93.0, rel=1e-9)
    assert not est.ambiguous
