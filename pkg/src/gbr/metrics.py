"""Reconstruction and view-synthesis metrics: Chamfer, F1, ATE, PSNR, SSIM."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, EmptyResultError
from .geometry import CameraIntrinsics, CameraPose, SimilarityTransform, project, umeyama
from .losses import ssim as _ssim


def _points(P, name: str) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64).reshape(-1, 3)
    if len(P) == 0:
        raise EmptyResultError(f"{name} point set is empty")
    return P


def nearest_distances(query: np.ndarray, ref: np.ndarray, k: int = 4) -> np.ndarray:
    """Exact Euclidean distance from each query point to its nearest reference point.

    The tree proposes ``k`` candidates and the distance is recomputed
    directly, so near-ties resolve the same way a brute-force scan does.
    """
    k = min(k, len(ref))
    _, idx = cKDTree(ref).query(query, k=k)
    idx = idx.reshape(len(query), k)
    d = np.linalg.norm(query[:, None, :] - ref[idx], axis=2)
    return d.min(axis=1)


def chamfer(A, B) -> float:
    """Half the sum of the two mean nearest-neighbour distances."""
    A, B = _points(A, "first"), _points(B, "second")
    return float(0.5 * (nearest_distances(A, B).mean() + nearest_distances(B, A).mean()))


def f1_score(pred, gt, tau: float) -> tuple[float, float, float]:
    """Precision, recall and their harmonic mean at distance threshold ``tau``."""
    if not tau > 0:
        raise ConfigError(f"F1 threshold must be positive, got {tau}")
    pred, gt = _points(pred, "predicted"), _points(gt, "ground-truth")
    precision = float(np.mean(nearest_distances(pred, gt) < tau))
    recall = float(np.mean(nearest_distances(gt, pred) < tau))
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def default_f1_threshold(points) -> float:
    P = _points(points, "reference")
    return 0.01 * float(np.linalg.norm(P.max(axis=0) - P.min(axis=0)))


def _centers(poses) -> np.ndarray:
    return np.array([p.center if isinstance(p, CameraPose) else np.asarray(p, dtype=np.float64) for p in poses]).reshape(-1, 3)


def ate_alignment(est_poses, gt_poses) -> tuple[float, SimilarityTransform]:
    """RMSE of camera centres after a similarity alignment of the estimate onto the ground truth."""
    E, G = _centers(est_poses), _centers(gt_poses)
    if len(E) != len(G):
        raise ConfigError(f"{len(E)} estimated poses but {len(G)} ground-truth poses")
    if len(E) < 2:
        raise ConfigError("ATE needs at least two poses")
    T = umeyama(E, G, with_scale=True)
    r = T.apply(E) - G
    return float(np.sqrt(np.mean(np.sum(r * r, axis=1)))), T


def ate(est_poses, gt_poses) -> float:
    return ate_alignment(est_poses, gt_poses)[0]


def psnr(img, ref, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` when the images agree to MSE < 1e-12."""
    a = np.asarray(img, dtype=np.float64)
    b = np.asarray(ref, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"images differ in size: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-12:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def ssim(img, ref) -> float:
    return _ssim(img, ref)


def sample_mesh_surface(vertices, faces, count: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Area-uniform samples on a triangle mesh with the face normal at each sample."""
    V = np.asarray(vertices, dtype=np.float64)
    F = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if not len(F):
        raise EmptyResultError("cannot sample an empty mesh")
    a, b, c = V[F[:, 0]], V[F[:, 1]], V[F[:, 2]]
    cr = np.cross(b - a, c - a)
    area = 0.5 * np.linalg.norm(cr, axis=1)
    if area.sum() <= 0:
        raise EmptyResultError("mesh has zero area")
    tri = rng.choice(len(F), size=count, p=area / area.sum())
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    P = (1 - r1)[:, None] * a[tri] + (r1 * (1 - r2))[:, None] * b[tri] + (r1 * r2)[:, None] * c[tri]
    n = cr[tri] / np.maximum(np.linalg.norm(cr[tri], axis=1, keepdims=True), 1e-300)
    return P, n


def visibility_counts(
    points: np.ndarray,
    normals: np.ndarray | None,
    cameras: list[tuple[CameraIntrinsics, CameraPose]],
    depths=None,
    rel_tol: float = 0.01,
) -> np.ndarray:
    """Number of cameras that see each point.

    A camera sees a point when it projects inside the image in front of the
    camera, faces it (if normals are given) and, when depth maps are given,
    agrees with the depth at its pixel within ``rel_tol``.
    """
    counts = np.zeros(len(points), dtype=np.int64)
    for i, (K, pose) in enumerate(cameras):
        uv, vis = project(points, K, pose)
        H, W = K.shape
        pix = np.rint(np.nan_to_num(uv, nan=-1.0)).astype(np.int64)
        vis &= (pix[:, 0] >= 0) & (pix[:, 0] < W) & (pix[:, 1] >= 0) & (pix[:, 1] < H)
        if normals is not None:
            vis &= np.einsum("ij,ij->i", normals, pose.center - points) > 0
        if depths is not None:
            D = depths[i]
            pc = np.clip(pix, 0, [W - 1, H - 1])
            z = pose.transform(points)[:, 2]
            d = D.depth[pc[:, 1], pc[:, 0]]
            vis &= D.valid_mask[pc[:, 1], pc[:, 0]] & (np.abs(d - z) <= rel_tol * np.abs(z))
        counts += vis
    return counts


def ground_truth_samples(
    vertices, faces, count: int, seed: int = 0, cameras=None, depths=None, min_views: int = 2
) -> np.ndarray:
    """Area-uniform GT samples, optionally keeping only those visible from ``min_views`` cameras."""
    rng = np.random.default_rng(seed)
    P, n = sample_mesh_surface(vertices, faces, count, rng)
    if cameras is None:
        return P
    keep = visibility_counts(P, n, cameras, depths) >= min_views
    if not keep.any():
        raise EmptyResultError(f"no ground-truth sample is visible from {min_views} views")
    return P[keep]


@dataclass
class EvalReport:
    chamfer: float | None = None
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    f1_threshold: float | None = None
    ate_rmse: float | None = None
    psnr: float | None = None
    ssim: float | None = None
    num_pred_points: int = 0
    num_gt_points: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["psnr"] is not None and math.isinf(d["psnr"]):
            d["psnr"] = "exact"
        return d


def evaluate(
    pred_points=None,
    gt_points=None,
    tau: float | None = None,
    est_poses=None,
    gt_poses=None,
    images=None,
    references=None,
) -> EvalReport:
    """Whichever metrics the given inputs allow."""
    rep = EvalReport()
    if pred_points is not None and gt_points is not None:
        pred, gt = _points(pred_points, "predicted"), _points(gt_points, "ground-truth")
        tau = default_f1_threshold(gt) if tau is None else tau
        rep.chamfer = chamfer(pred, gt)
        rep.precision, rep.recall, rep.f1 = f1_score(pred, gt, tau)
        rep.f1_threshold = tau
        rep.num_pred_points, rep.num_gt_points = len(pred), len(gt)
    if est_poses is not None and gt_poses is not None:
        rep.ate_rmse = ate(est_poses, gt_poses)
    if images is not None and references is not None:
        if len(images) != len(references) or not len(images):
            raise ConfigError("need the same, non-zero number of images and references")
        mse = float(np.mean([np.mean((np.asarray(a, float) - np.asarray(b, float)) ** 2) for a, b in zip(images, references)]))
        rep.psnr = math.inf if mse < 1e-12 else 10.0 * math.log10(1.0 / mse)
        rep.ssim = float(np.mean([_ssim(a, b) for a, b in zip(images, references)]))
    return rep
