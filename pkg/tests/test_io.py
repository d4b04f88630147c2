import numpy as np
import pytest

from gbr.errors import LoadError
from gbr.geometry import CameraIntrinsics, CameraPose
from gbr.io import (
    load_depth,
    load_scene,
    read_cameras,
    read_image,
    read_mask,
    read_ply,
    read_raw,
    save_depth,
    save_scene,
    write_cameras,
    write_image,
    write_mask,
    write_ply,
    write_raw,
)


def test_raw_roundtrip_float32(tmp_path, rng):
    a = rng.normal(size=(5, 7, 3))
    write_raw(tmp_path / "a.raw", a)
    b = read_raw(tmp_path / "a.raw")
    assert b.shape == (5, 7, 3)
    assert np.array_equal(b, a.astype(np.float32).astype(np.float64))


def test_raw_single_channel_comes_back_2d(tmp_path):
    write_raw(tmp_path / "a.raw", np.ones((3, 4)))
    assert read_raw(tmp_path / "a.raw").shape == (3, 4)


def test_raw_truncated_reports_offset(tmp_path):
    write_raw(tmp_path / "a.raw", np.ones((10, 10)))
    data = (tmp_path / "a.raw").read_bytes()
    (tmp_path / "a.raw").write_bytes(data[:100])
    with pytest.raises(LoadError, match="offset 100"):
        read_raw(tmp_path / "a.raw")


def test_raw_bad_magic(tmp_path):
    (tmp_path / "a.raw").write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(LoadError, match="magic"):
        read_raw(tmp_path / "a.raw")


def test_missing_raw_is_load_error(tmp_path):
    with pytest.raises(LoadError):
        read_raw(tmp_path / "nope.raw")


def test_image_and_mask_roundtrip(tmp_path, rng):
    img = np.round(rng.uniform(size=(6, 8, 3)) * 255) / 255
    write_image(tmp_path / "i.png", img)
    assert np.allclose(read_image(tmp_path / "i.png"), img)
    m = rng.uniform(size=(6, 8)) > 0.5
    write_mask(tmp_path / "m.png", m)
    assert np.array_equal(read_mask(tmp_path / "m.png"), m)


@pytest.mark.parametrize("binary", [True, False])
def test_ply_roundtrip(tmp_path, rng, binary):
    V = rng.normal(size=(20, 3))
    N = rng.normal(size=(20, 3))
    C = rng.uniform(size=(20, 3))
    F = rng.integers(0, 20, size=(7, 3))
    write_ply(tmp_path / "m.ply", V, normals=N, colors=C, faces=F, binary=binary)
    ply = read_ply(tmp_path / "m.ply")
    assert np.allclose(ply.vertices, V, atol=1e-6 if not binary else 0)
    assert np.allclose(ply.normals, N, atol=1e-6 if not binary else 0)
    assert np.array_equal(ply.colors, np.round(C * 255).astype(np.uint8))
    assert np.array_equal(ply.faces, F)


def test_cameras_roundtrip_is_exact(tmp_path, rng):
    from scipy.spatial.transform import Rotation

    cams = [
        (CameraIntrinsics(100.5, 101.0, 32.0, 24.0, 64, 48), CameraPose(Rotation.random(random_state=rng).as_matrix(), rng.normal(size=3)))
        for _ in range(3)
    ]
    write_cameras(tmp_path / "c.txt", cams)
    back = read_cameras(tmp_path / "c.txt")
    for (K, P), (K2, P2) in zip(cams, back):
        assert K == K2
        assert np.array_equal(P.rotation, P2.rotation) and np.array_equal(P.translation, P2.translation)


def test_malformed_cameras(tmp_path):
    (tmp_path / "c.txt").write_text("view 0\nintrinsics 1 1 0 0 4 4\n1 0 0\n")
    with pytest.raises(LoadError, match="malformed"):
        read_cameras(tmp_path / "c.txt")


def test_depth_roundtrip_marks_zero_invalid(tmp_path):
    D = np.array([[1.0, 0.0], [2.5, 3.0]])
    save_depth(tmp_path / "d.raw", D)
    back = load_depth(tmp_path / "d.raw")
    assert back.valid_mask.tolist() == [[True, False], [True, True]]


def test_scene_roundtrip(tmp_path, plane_scene):
    bundle, _ = plane_scene
    save_scene(bundle, tmp_path / "s")
    back = load_scene(tmp_path / "s")
    assert len(back.views) == len(bundle.views)
    assert back.pairs == bundle.pairs
    for a, b in zip(bundle.views, back.views):
        assert np.allclose(a.pointmap.points, b.pointmap.points, atol=1e-5, equal_nan=True)
        assert set(a.cross) == set(b.cross)


def test_scene_errors(tmp_path, plane_scene):
    with pytest.raises(LoadError, match="does not exist"):
        load_scene(tmp_path / "missing")
    bundle, _ = plane_scene
    root = save_scene(bundle, tmp_path / "s")
    (root / "pairs.txt").unlink()
    with pytest.raises(LoadError, match="pairs.txt"):
        load_scene(root)
    save_scene(bundle, root)
    write_raw(root / "view_001" / "conf.raw", np.ones((3, 3)))
    with pytest.raises(LoadError, match="dimension mismatch"):
        load_scene(root)


def test_pair_out_of_range(tmp_path, plane_scene):
    bundle, _ = plane_scene
    root = save_scene(bundle, tmp_path / "s")
    (root / "pairs.txt").write_text("0 99\n")
    with pytest.raises(LoadError, match="out of range"):
        load_scene(root)
