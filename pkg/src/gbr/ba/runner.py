"""The full camera and cloud optimisation stage, from raw point maps to a refined rig and cloud."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..geometry import CameraIntrinsics, orient_normals, pca_normals
from ..io import SceneBundle
from .align import AlignmentResult, estimate_focal, pairwise_align, scene_pair_maps
from .bundle import BAReport, CameraRig, bundle_adjust, merge_second_round
from .local import LocalRefineResult, local_refine, rigid_align
from .matching import MatchSet, extract_matches

logger = logging.getLogger(__name__)


@dataclass
class NeuralBAConfig:
    conf_primary: float = 3.0
    conf_secondary: float = 0.05
    cap_per_view: int | None = 50000
    second_round_conf: float = 2.0
    huber_delta: float | None = 2.0
    focal_mode: str = "none"  # none | shared | per_view
    max_iterations: int = 100
    rel_tol: float = 1e-10
    local_refine: bool = True
    residual_percentile: float = 95.0
    dbscan_eps_factor: float = 2.0
    dbscan_min_samples: int = 10
    mask_dilation: int = 5
    rigid_with_scale: bool = False


@dataclass
class NeuralBAResult:
    rig: CameraRig
    cloud: np.ndarray  # final cloud: both rounds plus local patches
    first_round: np.ndarray
    second_round: np.ndarray
    alignment: AlignmentResult
    matches: MatchSet
    second_matches: MatchSet
    report: BAReport
    focal_estimates: list[float] = field(default_factory=list)
    local: LocalRefineResult | None = None
    colors: np.ndarray | None = None
    normals: np.ndarray | None = None  # PCA normals facing the cameras that observed each point

    def summary(self) -> dict:
        return {
            "ba": self.report.to_dict(),
            "first_round_points": int(len(self.first_round)),
            "second_round_points": int(len(self.second_round)),
            "local_points": 0 if self.local is None else int(len(self.local.points)),
            "final_points": int(len(self.cloud)),
            "alignment_cost": [self.alignment.initial_cost, self.alignment.final_cost],
            "dropped_pairs": [list(p) for p in self.alignment.dropped_pairs],
            "focal_estimates": self.focal_estimates,
            "local_refine": None if self.local is None else self.local.to_dict(),
        }


def _track_colors(bundle: SceneBundle, m: MatchSet) -> np.ndarray:
    """Mean image colour over each track's observations."""
    cols = np.zeros((m.num_tracks, 3))
    for v in np.unique(m.view):
        sel = m.view == v
        img = bundle.views[v].image.reshape(-1, 3)
        np.add.at(cols, m.track[sel], img[m.cell[sel]])
    return cols / np.maximum(m.views_per_track(), 1)[:, None]


def _view_directions(m: MatchSet, points: np.ndarray, rig: CameraRig) -> np.ndarray:
    """Sum over each track's observing views of the unit direction from the point to the camera."""
    d = rig.centers[m.view] - points[m.track]
    d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
    out = np.zeros((len(points), 3))
    np.add.at(out, m.track, d)
    return out


def run_neural_ba(bundle: SceneBundle, cfg: NeuralBAConfig | None = None) -> NeuralBAResult:
    cfg = cfg or NeuralBAConfig()
    own, cross = scene_pair_maps(bundle)
    alignment = pairwise_align(own, cross, bundle.pairs)
    frames = alignment.unified(own)
    secondary = [v.secondary_confidence for v in bundle.views]

    focals = []
    if bundle.cameras is not None:
        intr = [K for K, _ in bundle.cameras]
    else:
        intr = []
        for v, f in enumerate(own):
            H, W = f.shape
            est = estimate_focal(f, min_confidence=cfg.conf_primary)
            if est.ambiguous:
                logger.warning("view %d: focal estimate is ambiguous (relative spread %.3g)", v, est.spread)
            focals.append(est.focal)
            intr.append(CameraIntrinsics.centered(est.focal, W, H))
    rig0 = CameraRig(intr, alignment.poses())

    m1 = extract_matches(frames, bundle.pairs, secondary, cfg.conf_primary, cfg.conf_secondary, cfg.cap_per_view)
    rig, X1, report = bundle_adjust(
        m1, rig0, mode="full", huber_delta=cfg.huber_delta, focal_mode=cfg.focal_mode,
        max_iterations=cfg.max_iterations, rel_tol=cfg.rel_tol,
    )

    used = m1.cells_by_view(len(frames))
    m2 = extract_matches(
        frames, bundle.pairs, secondary, cfg.second_round_conf, cfg.conf_secondary, cfg.cap_per_view,
        exclude=used, require_nonempty=False,
    )
    X2 = np.zeros((0, 3))
    if m2.num_tracks:
        _, X2, _ = bundle_adjust(m2, rig, mode="points_only", huber_delta=cfg.huber_delta)
    merged = merge_second_round(X1, X2)
    initial = np.concatenate([m1.points, m2.points])
    colors = np.concatenate([_track_colors(bundle, m1), _track_colors(bundle, m2)])

    dirs = np.concatenate([_view_directions(m1, X1, rig), _view_directions(m2, X2, rig)])
    local = None
    cloud = merged
    if cfg.local_refine and len(merged) >= 3:
        T = rigid_align(initial, merged, with_scale=cfg.rigid_with_scale)
        residuals = np.linalg.norm(merged - T.apply(initial), axis=1)
        local = local_refine(
            merged, residuals, frames, rig, bundle.pairs, secondary,
            percentile=cfg.residual_percentile, eps_factor=cfg.dbscan_eps_factor,
            min_samples=cfg.dbscan_min_samples, dilation=cfg.mask_dilation,
            conf_threshold=cfg.second_round_conf, conf_secondary_threshold=cfg.conf_secondary,
            huber_delta=cfg.huber_delta,
        )
        if len(local.points):
            flagged = local.cluster_labels >= 0
            cloud = np.concatenate([merged[~flagged], local.points])
            colors = np.concatenate([colors[~flagged], _track_colors(bundle, local.matches)])
            dirs = np.concatenate([dirs[~flagged], _view_directions(local.matches, local.points, rig)])
    normals = None
    if len(cloud) >= 3:
        normals = orient_normals(pca_normals(cloud)[0], cloud, dirs)
    return NeuralBAResult(rig, cloud, X1, X2, alignment, m1, m2, report, focals, local, colors, normals)
