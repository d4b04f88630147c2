import numpy as np
import pytest

from gbr.errors import ConfigError
from gbr.geometry import project
from gbr.synthetic import PRESETS, Sphere, SyntheticSceneSpec, camera_ring, generate_synthetic, make_surface, raycast_view


def test_spec_validation():
    with pytest.raises(ConfigError):
        SyntheticSceneSpec(num_views=1)
    with pytest.raises(ConfigError):
        SyntheticSceneSpec(surface="torus")
    with pytest.raises(ConfigError):
        SyntheticSceneSpec(pixel_noise=-1)


def test_sphere_raycast_hits_at_analytic_distance():
    s = Sphere()
    t, n = s.raycast(np.array([0.0, 0.0, -3.0]), np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0]]))
    assert t[0] == pytest.approx(2.0) and np.isinf(t[1])
    assert np.allclose(n[0], [0, 0, -1])


def test_heightfield_raycast_lands_on_surface(rng):
    h = make_surface(PRESETS["heightfield"])
    origin = np.array([0.1, -0.2, 2.5])
    dirs = np.column_stack([0.3 * rng.uniform(-1, 1, 50), 0.3 * rng.uniform(-1, 1, 50), -np.ones(50)])
    t, _ = h.raycast(origin, dirs)
    hit = np.isfinite(t)
    P = origin + t[hit, None] * dirs[hit]
    assert hit.any()
    assert np.abs(P[:, 2] - h.height(P[:, 0], P[:, 1])).max() < 1e-6


def test_camera_ring_looks_at_the_object():
    poses = camera_ring(PRESETS["sphere"])
    assert len(poses) == PRESETS["sphere"].num_views
    for P in poses:
        assert P.transform(np.zeros(3))[2] > 0


def test_ground_truth_depth_reprojects(sphere_scene):
    bundle, gt = sphere_scene
    K, P = gt.cameras[0]
    depth, X, _, hit = raycast_view(gt.surface, K, P)
    uv, vis = project(X[hit], K, P)
    v, u = np.nonzero(hit)
    assert vis.all() and np.allclose(uv, np.column_stack([u, v]), atol=1e-8)
    assert np.allclose(np.linalg.norm(X[hit], axis=1), 1.0, atol=1e-9)
    assert np.allclose(gt.depths[0].depth[hit], depth[hit])


def test_generation_is_deterministic():
    spec = SyntheticSceneSpec(num_views=3, width=32, height=24, focal=30.0, point_noise=0.01, seed=5)
    a, _ = generate_synthetic(spec)
    b, _ = generate_synthetic(spec)
    for va, vb in zip(a.views, b.views):
        assert np.array_equal(va.pointmap.points, vb.pointmap.points, equal_nan=True)
        assert np.array_equal(va.image, vb.image)


def test_noise_free_point_maps_lie_on_the_surface(plane_scene):
    bundle, gt = plane_scene
    # each point map is expressed in its own camera frame
    P = bundle.views[0].pointmap.points
    ok = np.all(np.isfinite(P), axis=-1)
    assert ok.any()
    X = gt.poses[0].inverse_transform(P[ok])
    assert np.abs(gt.surface.signed_distance(X)).max() < 1e-6
