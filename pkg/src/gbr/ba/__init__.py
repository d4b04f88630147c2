"""Camera and cloud optimisation from per-view point maps."""

from .align import AlignmentResult, FocalEstimate, estimate_focal, pairwise_align, scene_pair_maps
from .bundle import BAReport, CameraRig, bundle_adjust, merge_second_round, reprojection_rmse
from .local import LocalRefineResult, cluster_residuals, hull_mask, local_refine, rigid_align, track_errors
from .matching import MatchSet, brute_force_reciprocal, extract_matches, reciprocal_nearest_neighbors
from .runner import NeuralBAConfig, NeuralBAResult, run_neural_ba

__all__ = [
    "AlignmentResult", "FocalEstimate", "estimate_focal", "pairwise_align", "scene_pair_maps",
    "BAReport", "CameraRig", "bundle_adjust", "merge_second_round", "reprojection_rmse",
    "LocalRefineResult", "cluster_residuals", "hull_mask", "local_refine", "rigid_align", "track_errors",
    "MatchSet", "brute_force_reciprocal", "extract_matches", "reciprocal_nearest_neighbors",
    "NeuralBAConfig", "NeuralBAResult", "run_neural_ba",
]
