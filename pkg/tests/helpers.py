"""Fixture builders and brute-force oracles shared by the test modules."""

from __future__ import annotations

import numpy as np

from gbr.ba import CameraRig, MatchSet
from gbr.geometry import CameraPose, project, rotvec_to_matrix, umeyama


def sphere_points(n: int, seed: int = 0, radius: float = 1.0) -> np.ndarray:
    P = np.random.default_rng(seed).normal(size=(n, 3))
    return radius * P / np.linalg.norm(P, axis=1, keepdims=True)


def exact_tracks(points: np.ndarray, cameras, noise: float = 0.0, seed: int = 0, min_views: int = 2) -> MatchSet:
    """Tracks of sphere points seen (front-facing, in frame) by at least ``min_views`` cameras.

    Pixel observations are the exact projections plus optional Gaussian noise.
    """
    rng = np.random.default_rng(seed)
    tr, vw, px = [], [], []
    for v, (K, pose) in enumerate(cameras):
        uv, vis = project(points, K, pose)
        facing = np.einsum("ij,ij->i", pose.center - points, points) > 0
        inside = (uv[:, 0] >= 0) & (uv[:, 0] < K.width) & (uv[:, 1] >= 0) & (uv[:, 1] < K.height)
        ok = vis & facing & inside
        tr.append(np.flatnonzero(ok))
        vw.append(np.full(ok.sum(), v))
        px.append(uv[ok])
    t, v, p = np.concatenate(tr), np.concatenate(vw), np.concatenate(px)
    keep = np.bincount(t, minlength=len(points)) >= min_views
    remap = -np.ones(len(points), dtype=np.int64)
    remap[keep] = np.arange(keep.sum())
    sel = keep[t]
    t, v, p = remap[t[sel]], v[sel], p[sel]
    order = np.lexsort((v, t))
    t, v, p = t[order], v[order], p[order]
    p = p + noise * rng.normal(size=p.shape)
    return MatchSet(points[keep], t, v, p, np.zeros(len(t), dtype=np.int64), np.ones(len(t)))


def perturb_poses(poses, seed: int = 0, angle_deg: float = 1.0, rel: float = 0.01):
    """Rotate every pose but the first by ``angle_deg`` about a random axis and move its translation by ``rel``."""
    rng = np.random.default_rng(seed)
    out = [poses[0]]
    for pose in poses[1:]:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        R = rotvec_to_matrix(np.radians(angle_deg) * axis) @ pose.rotation
        t = pose.translation + rel * np.linalg.norm(pose.translation) * u
        out.append(CameraPose(R, t))
    return out


def ate_of(est_centers, gt_centers) -> float:
    E, G = np.asarray(est_centers), np.asarray(gt_centers)
    T = umeyama(E, G, with_scale=True)
    return float(np.sqrt(np.mean(np.sum((T.apply(E) - G) ** 2, axis=1))))


def rig_from(cameras) -> CameraRig:
    return CameraRig([K for K, _ in cameras], [P for _, P in cameras])


def brute_nearest(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Distance from each row of A to the closest row of B by exhaustive search."""
    out = np.empty(len(A))
    for i, a in enumerate(A):
        out[i] = np.sqrt(((B - a) ** 2).sum(axis=1)).min()
    return out
