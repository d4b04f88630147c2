"""Scale-consistent depth: cloud projection, per-window affine correction of
detail-rich candidates against the projected depth, and candidate aggregation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .errors import ConfigError
from .geometry import CameraIntrinsics, CameraPose, DepthMap, NormalMap, normals_from_depth, project

logger = logging.getLogger(__name__)


def project_cloud_depth(
    points: np.ndarray,
    K: CameraIntrinsics,
    pose: CameraPose,
    fill_holes: bool = False,
    fill_radius: int = 3,
    normals: np.ndarray | None = None,
) -> DepthMap:
    """Z-buffered depth of a point cloud; each point lands on its nearest pixel.

    Given oriented ``normals``, points facing away from the camera are
    culled first; a sparse cloud otherwise lets the far side of an object
    show through gaps in the near side. With ``fill_holes`` every unhit pixel that has valid pixels within
    ``fill_radius`` takes their median and is flagged in ``filled_mask``.
    """
    H, W = K.shape
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    depth = np.full(H * W, np.inf)
    if len(points):
        uv, vis = project(points, K, pose)
        if normals is not None:
            vis &= np.einsum("ij,ij->i", np.asarray(normals, dtype=np.float64).reshape(-1, 3), pose.center - points) > 0
        z = pose.transform(points)[:, 2]
        pix = np.where(vis[:, None], np.rint(np.nan_to_num(uv, nan=-1.0)), -1.0).astype(np.int64)
        ok = vis & (pix[:, 0] >= 0) & (pix[:, 0] < W) & (pix[:, 1] >= 0) & (pix[:, 1] < H)
        np.minimum.at(depth, pix[ok, 1] * W + pix[ok, 0], z[ok])
    depth = depth.reshape(H, W)
    valid = np.isfinite(depth)
    if not valid.any():
        logger.warning("no cloud point is visible in this view; depth map is empty")
        return DepthMap(np.zeros((H, W)), valid)
    depth = np.where(valid, depth, 0.0)
    filled = np.zeros((H, W), dtype=bool)
    if fill_holes:
        r = fill_radius
        padded = np.pad(np.where(valid, depth, np.nan), r, constant_values=np.nan)
        win = sliding_window_view(padded, (2 * r + 1, 2 * r + 1))
        foot = ~(np.add.outer(np.arange(-r, r + 1) ** 2, np.arange(-r, r + 1) ** 2) <= r * r)
        holes = ~valid & ndimage.binary_dilation(valid, structure=~foot)
        if holes.any():
            cand = win[holes].copy()
            cand[:, foot] = np.nan
            depth[holes] = np.nanmedian(cand.reshape(len(cand), -1), axis=1)
            filled = holes
    return DepthMap(depth, valid | filled, filled)


@dataclass(frozen=True)
class ScaleCorrectionConfig:
    window: int = 25
    stride: int = 1
    eps_edge: float = 1e-7
    eps_smooth: float = 1e-7
    tau_e: float = 0.5

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ConfigError(f"window must be odd and >= 3, got {self.window}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.eps_edge < 0 or self.eps_smooth < 0:
            raise ConfigError("regularisation weights must be non-negative")
        if self.tau_e <= 0:
            raise ConfigError("tau_e must be positive")


@dataclass(frozen=True)
class AggregationConfig:
    tau_D: float = 0.25
    min_accepted: int = 1

    def __post_init__(self):
        if self.tau_D <= 0:
            raise ConfigError("tau_D must be positive")


def _box_sum(a: np.ndarray, size: int) -> np.ndarray:
    """Sum over the ``size x size`` window centred on each pixel, truncated at the border."""
    r = size // 2
    c = np.pad(a, ((r + 1, r), (r + 1, r))).cumsum(0).cumsum(1)
    return c[size:, size:] - c[:-size, size:] - c[size:, :-size] + c[:-size, :-size]


def relative_gradient(D0: DepthMap) -> np.ndarray:
    """Central-difference gradient magnitude of ``D0`` divided by the depth itself.

    Zero where either neighbour along an axis is invalid.
    """
    Z, M = D0.depth, D0.valid_mask
    gx = np.zeros_like(Z)
    gy = np.zeros_like(Z)
    okx = M[:, 2:] & M[:, :-2]
    oky = M[2:, :] & M[:-2, :]
    gx[:, 1:-1] = np.where(okx, (Z[:, 2:] - Z[:, :-2]) / 2.0, 0.0)
    gy[1:-1, :] = np.where(oky, (Z[2:, :] - Z[:-2, :]) / 2.0, 0.0)
    return np.where(M, np.hypot(gx, gy) / np.where(M, Z, 1.0), 0.0)


def window_coefficients(D: DepthMap, D0: DepthMap, cfg: ScaleCorrectionConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-window affine coefficients ``(a_k, b_k)`` and the window cell counts.

    The window ``k`` is centred on pixel ``k``. Only cells valid in both maps
    enter the statistics. Windows with fewer than 4 such cells take the
    coefficients of the nearest window that has enough.
    """
    M = D.valid_mask & D0.valid_mask
    if not M.any():
        raise ConfigError("candidate and reference depth share no valid pixel")
    w = cfg.window
    Mf = M.astype(np.float64)
    # shifting by global means conditions the moment sums; a and the fit are shift-invariant
    mu, mu0 = D.depth[M].mean(), D0.depth[M].mean()
    X = np.where(M, D.depth - mu, 0.0)
    Y = np.where(M, D0.depth - mu0, 0.0)
    n = np.rint(_box_sum(Mf, w))
    safe = np.maximum(n, 1.0)
    mx = _box_sum(X, w) / safe
    my = _box_sum(Y, w) / safe
    var = _box_sum(X * X, w) / safe - mx * mx
    cov = _box_sum(X * Y, w) / safe - mx * my
    var = np.maximum(var, 0.0)
    grad = relative_gradient(D0)
    eps = np.where(grad >= cfg.tau_e, cfg.eps_edge, cfg.eps_smooth)
    denom = var + eps / safe
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(denom > 0, cov / np.where(denom > 0, denom, 1.0), 0.0)
    b = (my + mu0) - a * (mx + mu)
    ok = n >= 4
    if not ok.all():
        if not ok.any():
            raise ConfigError("no window has 4 jointly valid cells; use a larger window")
        _, (ii, jj) = ndimage.distance_transform_edt(~ok, return_indices=True)
        a, b = a[ii, jj], b[ii, jj]
    return a, b, n


def scale_correct(D: DepthMap, D0: DepthMap, cfg: ScaleCorrectionConfig | None = None) -> DepthMap:
    """Correct candidate ``D`` towards the scale of ``D0`` with spatially varying affine fits.

    Each window minimises ``sum (a D + b - D0)^2 + eps a^2``; a pixel's
    coefficients are the mean over every window covering it (stride 1) or a
    bilinear interpolation of the strided window grid.
    """
    cfg = cfg or ScaleCorrectionConfig()
    if D.shape != D0.shape:
        raise ConfigError(f"candidate {D.shape} and reference {D0.shape} differ in size")
    a, b, _ = window_coefficients(D, D0, cfg)
    H, W = D.shape
    if cfg.stride == 1:
        ones = _box_sum(np.ones((H, W)), cfg.window)
        a_i = _box_sum(a, cfg.window) / ones
        b_i = _box_sum(b, cfg.window) / ones
    else:
        s = cfg.stride
        rows = np.arange(0, H, s)
        cols = np.arange(0, W, s)
        if rows[-1] != H - 1:
            rows = np.append(rows, H - 1)
        if cols[-1] != W - 1:
            cols = np.append(cols, W - 1)
        ga, gb = a[np.ix_(rows, cols)], b[np.ix_(rows, cols)]
        rr = np.interp(np.arange(H), rows, np.arange(len(rows)))
        cc = np.interp(np.arange(W), cols, np.arange(len(cols)))
        coords = np.meshgrid(rr, cc, indexing="ij")
        a_i = ndimage.map_coordinates(ga, coords, order=1, mode="nearest")
        b_i = ndimage.map_coordinates(gb, coords, order=1, mode="nearest")
    out = a_i * D.depth + b_i
    valid = D.valid_mask & (out > 0)
    return DepthMap(np.where(valid, out, 0.0), valid)


def candidate_score(candidate: DepthMap, D0: DepthMap) -> float:
    """RMS deviation from ``D0`` over jointly valid pixels, divided by the mean of ``D0``."""
    M = candidate.valid_mask & D0.valid_mask
    if not M.any():
        return np.inf
    rms = np.sqrt(np.mean((candidate.depth[M] - D0.depth[M]) ** 2))
    return float(rms / D0.depth[D0.valid_mask].mean())


def aggregate_candidates(
    candidates: list[DepthMap], D0: DepthMap, cfg: AggregationConfig | None = None
) -> tuple[DepthMap, dict]:
    """Per-pixel mean of the candidates whose normalised RMS deviation from ``D0`` is within ``tau_D``.

    Falls back to ``D0`` when fewer than ``min_accepted`` candidates pass.
    Pixels no accepted candidate covers keep ``D0``.
    """
    cfg = cfg or AggregationConfig()
    if not candidates:
        raise ConfigError("aggregation needs at least one candidate")
    scores = [candidate_score(c, D0) for c in candidates]
    accepted = [i for i, s in enumerate(scores) if s <= cfg.tau_D]
    report = {"scores": scores, "accepted": accepted, "rejected": [i for i in range(len(scores)) if i not in accepted]}
    if len(accepted) < max(cfg.min_accepted, 1):
        logger.warning("%d of %d depth candidates accepted; falling back to the reference depth", len(accepted), len(candidates))
        report["fallback"] = True
        return DepthMap(D0.depth.copy(), D0.valid_mask.copy()), report
    report["fallback"] = False
    stack = np.stack([np.where(candidates[i].valid_mask, candidates[i].depth, np.nan) for i in accepted])
    # sorting along the candidate axis makes the sum independent of candidate order
    stack = np.sort(stack, axis=0)
    count = np.isfinite(stack).sum(axis=0)
    total = np.nansum(stack, axis=0)
    covered = count > 0
    depth = np.where(covered, total / np.maximum(count, 1), D0.depth)
    valid = covered | D0.valid_mask
    return DepthMap(np.where(valid, depth, 0.0), valid), report


@dataclass
class RefineResult:
    depth: DepthMap
    normals: NormalMap
    initial: DepthMap
    report: dict = field(default_factory=dict)


def refine_view(
    view: int,
    cloud: np.ndarray,
    K: CameraIntrinsics,
    pose: CameraPose,
    provider,
    rounds: int = 10,
    scale_cfg: ScaleCorrectionConfig | None = None,
    agg_cfg: AggregationConfig | None = None,
    fill_holes: bool = True,
    initial: DepthMap | None = None,
    normals: np.ndarray | None = None,
) -> RefineResult:
    """Project the cloud, refine each candidate chain for ``rounds`` rounds, aggregate, derive normals.

    Every candidate chain starts from the projected depth; in each round the
    provider produces a candidate from the chain's current map and the
    candidate is corrected against the projected depth, which becomes the
    next round's input. File-backed providers give fixed candidates, so they
    are corrected once.
    """
    scale_cfg = scale_cfg or ScaleCorrectionConfig()
    D0 = initial if initial is not None else project_cloud_depth(cloud, K, pose, fill_holes=fill_holes, normals=normals)
    if not D0.valid_mask.any():
        raise ConfigError(f"view {view}: the cloud does not project into the image")
    n_rounds = rounds if provider.chained else 1
    finals = []
    for j in range(provider.samples_per_view):
        X = D0
        for r in range(n_rounds):
            X = scale_correct(provider.sample_one(view, X, j, r), D0, scale_cfg)
        finals.append(X)
    final, report = aggregate_candidates(finals, D0, agg_cfg)
    report.update({"view": view, "rounds": n_rounds, "initial_mean": D0.mean(), "final_mean": final.mean()})
    return RefineResult(final, normals_from_depth(final, K), D0, report)
