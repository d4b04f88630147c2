"""Post-BA consistency check and local densification of misaligned regions."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_dilation
from scipy.spatial import ConvexHull, QhullError, cKDTree
from skimage.draw import polygon
from sklearn.cluster import DBSCAN

from ..errors import NumericalError
from ..geometry import PointMapFrame, SimilarityTransform, project, umeyama
from .bundle import CameraRig, bundle_adjust
from .matching import MatchSet, extract_matches

logger = logging.getLogger(__name__)


def rigid_align(initial: np.ndarray, optimized: np.ndarray, with_scale: bool = False) -> SimilarityTransform:
    """Least-squares ``T`` with ``optimized ≈ T(initial)``; rigid unless ``with_scale``."""
    initial = np.asarray(initial, dtype=np.float64).reshape(-1, 3)
    optimized = np.asarray(optimized, dtype=np.float64).reshape(-1, 3)
    if len(initial) != len(optimized):
        raise ValueError("rigid_align needs corresponding point sets of equal size")
    if len(initial) < 3:
        raise NumericalError(f"rigid_align needs at least 3 correspondences, got {len(initial)}")
    try:
        return umeyama(initial, optimized, with_scale=with_scale)
    except ValueError as exc:
        raise NumericalError(f"rigid_align failed: {exc}") from exc


def median_spacing(points: np.ndarray) -> float:
    """Median distance from each point to its nearest other point."""
    if len(points) < 2:
        return 0.0
    d, _ = cKDTree(points).query(points, k=2)
    return float(np.median(d[:, 1]))


def disk(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius**2


def hull_mask(pixels: np.ndarray, shape: tuple[int, int], dilation: int = 5) -> np.ndarray:
    """Filled convex hull of ``pixels`` (u, v), dilated by a disk of ``dilation`` px."""
    H, W = shape
    mask = np.zeros(shape, dtype=bool)
    if len(pixels) == 0:
        return mask
    pix = np.round(pixels).astype(int)
    try:
        hull = ConvexHull(pixels)
        verts = pixels[hull.vertices]
        rr, cc = polygon(verts[:, 1], verts[:, 0], shape)
        mask[rr, cc] = True
    except (QhullError, ValueError):
        pass  # collinear or too few points; fall back to the pixels themselves
    inside = (pix[:, 0] >= 0) & (pix[:, 0] < W) & (pix[:, 1] >= 0) & (pix[:, 1] < H)
    mask[pix[inside, 1], pix[inside, 0]] = True
    if dilation > 0:
        mask = binary_dilation(mask, structure=disk(dilation))
    return mask


@dataclass
class LocalRefineResult:
    points: np.ndarray  # new patch points
    cluster_labels: np.ndarray  # per input point, -1 = not in a cluster
    threshold: float
    eps: float
    masks: list[np.ndarray] = field(default_factory=list)
    matches: MatchSet | None = None
    note: str = ""

    @property
    def num_clusters(self) -> int:
        return int(self.cluster_labels.max() + 1) if len(self.cluster_labels) else 0

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "eps": self.eps,
            "clusters": self.num_clusters,
            "flagged_points": int((self.cluster_labels >= 0).sum()),
            "new_points": int(len(self.points)),
            "mask_pixels": [int(m.sum()) for m in self.masks],
            "note": self.note,
        }


def cluster_residuals(
    points: np.ndarray,
    residuals: np.ndarray,
    percentile: float = 95.0,
    eps_factor: float = 2.0,
    min_samples: int = 10,
    eps: float | None = None,
) -> tuple[np.ndarray, float, float]:
    """DBSCAN labels of the high-residual points (``-1`` elsewhere), threshold and eps."""
    points = np.asarray(points, dtype=np.float64)
    residuals = np.asarray(residuals, dtype=np.float64)
    labels = -np.ones(len(points), dtype=np.int64)
    if len(points) == 0:
        return labels, 0.0, 0.0
    thr = float(np.percentile(residuals, percentile))
    high = np.flatnonzero(residuals > thr)
    if eps is None:
        eps = eps_factor * median_spacing(points)
    if len(high) < min_samples or eps <= 0:
        return labels, thr, float(eps)
    sub = DBSCAN(eps=eps, min_samples=min_samples).fit_predict(points[high])
    labels[high] = sub
    return labels, thr, float(eps)


def local_refine(
    points: np.ndarray,
    residuals: np.ndarray,
    frames: list[PointMapFrame],
    rig: CameraRig,
    pairs: list[tuple[int, int]],
    secondary: list[np.ndarray] | None = None,
    percentile: float = 95.0,
    eps_factor: float = 2.0,
    min_samples: int = 10,
    dilation: int = 5,
    conf_threshold: float = 2.0,
    conf_secondary_threshold: float = 0.05,
    huber_delta: float | None = 2.0,
    max_track_error: float = 2.0,
) -> LocalRefineResult:
    """Densify matches inside the image regions covered by high-residual clusters.

    ``points`` is the optimised cloud and ``residuals`` the per-point distance
    to the rigidly aligned initial cloud. Clusters of points above the
    ``percentile`` threshold are projected into every view; the dilated convex
    hull of each projection becomes a matching region. Matching is re-run
    there at ``conf_threshold`` without a per-view cap, and the new tracks are
    refined with cameras fixed. Tracks whose worst reprojection error after
    refinement exceeds ``max_track_error`` px are discarded.
    """
    labels, thr, eps = cluster_residuals(points, residuals, percentile, eps_factor, min_samples)
    n = len(rig)
    empty_masks = [np.zeros(K.shape, bool) for K in rig.intrinsics]
    if (labels < 0).all():
        note = "no high-residual clusters; nothing to refine"
        logger.info(note)
        return LocalRefineResult(np.zeros((0, 3)), labels, thr, eps, empty_masks, None, note)

    masks = [m.copy() for m in empty_masks]
    for c in range(labels.max() + 1):
        cluster = points[labels == c]
        for v in range(n):
            K, pose = rig.intrinsics[v], rig.poses[v]
            uv, vis = project(cluster, K, pose)
            inb = vis & (uv[:, 0] >= -0.5) & (uv[:, 0] < K.width - 0.5) & (uv[:, 1] >= -0.5) & (uv[:, 1] < K.height - 0.5)
            if inb.sum() == 0:
                continue
            masks[v] |= hull_mask(uv[inb], K.shape, dilation)

    matches = extract_matches(
        frames, pairs, secondary, conf_threshold, conf_secondary_threshold, None, masks=masks, require_nonempty=False
    )
    if matches.num_tracks == 0:
        note = "no matches inside the refinement regions"
        return LocalRefineResult(np.zeros((0, 3)), labels, thr, eps, masks, matches, note)
    _, refined, _ = bundle_adjust(matches, rig, mode="points_only", huber_delta=huber_delta)
    err = track_errors(matches, rig, refined)
    keep = err <= max_track_error
    matches = matches.subset(keep).with_points(refined[keep])
    note = f"{labels.max() + 1} clusters, {int(keep.sum())} of {len(keep)} region tracks kept"
    return LocalRefineResult(matches.points, labels, thr, eps, masks, matches, note)


def track_errors(matches: MatchSet, rig: CameraRig, points: np.ndarray) -> np.ndarray:
    """Worst reprojection error (px) of each track."""
    err = np.zeros(matches.num_tracks)
    for v in np.unique(matches.view):
        sel = matches.view == v
        uv, vis = project(points[matches.track[sel]], rig.intrinsics[v], rig.poses[v])
        e = np.where(vis, np.linalg.norm(uv - matches.pixel[sel], axis=1), np.inf)
        np.maximum.at(err, matches.track[sel], e)
    return err
