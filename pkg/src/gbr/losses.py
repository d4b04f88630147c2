"""Supervision terms for splat optimisation and pseudo-view synthesis.

Every loss is a plain reduction over numpy rasters. Sums go through
``math.fsum`` so the value does not depend on pixel traversal order.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation, Slerp

from .depth import project_cloud_depth
from .errors import ConfigError, EmptyResultError
from .geometry import CameraIntrinsics, CameraPose, DepthMap, NormalMap, depth_to_points, normals_from_depth, project

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SupervisionConfig:
    beta: float = 0.1
    normal_window: int = 3
    pseudo_view_count: int = 1
    pseudo_epsilon: float = 0.02
    lambda_pho: float = 0.2
    lambda1: float = 0.005  # normal
    lambda2: float = 0.005  # depth
    lambda3: float = 0.1  # normal-depth consistency
    lambda4: float = 0.1  # cycle projection
    pseudo_weight: float = 0.5
    jitter_probability: float = 0.5
    jitter_angle_deg: float = 2.0

    def __post_init__(self):
        weights = (self.beta, self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.pseudo_weight, self.pseudo_epsilon)
        if any(w < 0 for w in weights):
            raise ConfigError("supervision weights must be non-negative")
        if not 0.0 <= self.lambda_pho <= 1.0:
            raise ConfigError(f"lambda_pho must lie in [0, 1], got {self.lambda_pho}")
        if self.normal_window < 1 or self.normal_window % 2 == 0:
            raise ConfigError(f"normal_window must be a positive odd integer, got {self.normal_window}")
        if self.pseudo_view_count < 0:
            raise ConfigError("pseudo_view_count must be >= 0")
        if not 0.0 <= self.jitter_probability <= 1.0:
            raise ConfigError("jitter_probability must lie in [0, 1]")


def _fsum(a: np.ndarray) -> float:
    return math.fsum(np.asarray(a, dtype=np.float64).ravel().tolist())


def depth_weights(D_star: np.ndarray, D0: np.ndarray, beta: float = 0.1) -> np.ndarray:
    """Confidence ``1 / (1 + beta |D* - D0| / |D0|)``; lies in (0, 1]."""
    return 1.0 / (1.0 + beta * np.abs(D_star - D0) / np.abs(D0))


def depth_loss(
    D_star: DepthMap, D0: DepthMap, rendered: DepthMap, sky: np.ndarray | None = None, beta: float = 0.1
) -> float:
    """Confidence-weighted L1 between the reference and the rendered depth, sky excluded."""
    if not (D_star.shape == D0.shape == rendered.shape):
        raise ConfigError(f"depth rasters differ in size: {D_star.shape}, {D0.shape}, {rendered.shape}")
    valid = D_star.valid_mask & D0.valid_mask & rendered.valid_mask & (D0.depth != 0)
    if sky is not None:
        valid &= ~np.asarray(sky, dtype=bool)
    if not valid.any():
        raise EmptyResultError("depth loss has no valid non-sky pixel")
    ds, d0, dr = D_star.depth[valid], D0.depth[valid], rendered.depth[valid]
    w = depth_weights(ds, d0, beta)
    return _fsum(w * np.abs(ds - dr)) / _fsum(w)


def _window_sum(a: np.ndarray, w: int) -> np.ndarray:
    return ndimage.uniform_filter(a, size=w, mode="constant", cval=0.0) * (w * w)


def normal_consistency(N_hat: NormalMap, window: int = 3) -> np.ndarray:
    """Mean cosine between each window normal and the window's mean normal.

    Only valid normals enter a window. For unit normals this equals the
    length of the mean vector, so it lies in [0, 1]; windows with a zero mean
    get 0.
    """
    M = N_hat.valid_mask.astype(np.float64)
    n = np.rint(_window_sum(M, window))
    S = np.stack([_window_sum(N_hat.normals[..., c] * M, window) for c in range(3)], axis=-1)
    norm = np.linalg.norm(S, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        C = np.where((n > 0) & (norm > 1e-12), norm / np.maximum(n, 1.0), 0.0)
    return np.clip(C, 0.0, 1.0)


def normal_loss(N: NormalMap, N_hat: NormalMap, window: int = 3, sky: np.ndarray | None = None) -> float:
    """Structure-weighted L1 distance between rendered normals ``N`` and depth-derived normals ``N_hat``."""
    if N.normals.shape != N_hat.normals.shape:
        raise ConfigError(f"normal maps differ in size: {N.normals.shape} vs {N_hat.normals.shape}")
    valid = N.valid_mask & N_hat.valid_mask
    if sky is not None:
        valid &= ~np.asarray(sky, dtype=bool)
    if not valid.any():
        raise EmptyResultError("normal loss has no pixel valid in both maps")
    w = (1.0 + normal_consistency(N_hat, window)) / 2.0
    diff = np.abs(N.normals - N_hat.normals).sum(axis=-1)
    return _fsum(w[valid] * diff[valid]) / _fsum(w[valid])


def depth_gradient(D: DepthMap) -> np.ndarray:
    """Central-difference gradient magnitude, min-max normalised to [0, 1] over pixels where it exists.

    Pixels whose neighbours are invalid get 0. A constant map has no range
    to normalise and yields all zeros.
    """
    Z, M = D.depth, D.valid_mask
    gx = np.zeros_like(Z)
    gy = np.zeros_like(Z)
    okx = np.zeros_like(M)
    oky = np.zeros_like(M)
    okx[:, 1:-1] = M[:, 2:] & M[:, :-2]
    oky[1:-1, :] = M[2:, :] & M[:-2, :]
    gx[:, 1:-1] = (Z[:, 2:] - Z[:, :-2]) / 2.0
    gy[1:-1, :] = (Z[2:, :] - Z[:-2, :]) / 2.0
    ok = okx & oky & M
    g = np.where(ok, np.hypot(gx, gy), 0.0)
    if not ok.any():
        return g
    lo, hi = g[ok].min(), g[ok].max()
    if hi - lo <= 1e-12 * max(hi, 1.0):
        return np.zeros_like(g)
    return np.where(ok, (g - lo) / (hi - lo), 0.0)


def ndc_loss(D: DepthMap, N: NormalMap, K: CameraIntrinsics) -> float:
    """Gradient-weighted L1 between rendered normals and normals of the rendered depth, over W*H."""
    H, W = D.shape
    N_hat = normals_from_depth(D, K)
    g = depth_gradient(D)
    both = N_hat.valid_mask & N.valid_mask
    diff = np.abs(N_hat.normals - N.normals).sum(axis=-1)
    return _fsum(np.where(both, g * diff, 0.0)) / (W * H)


def _bilinear_inverse_depth(D: DepthMap, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Depth at sub-pixel ``uv`` by bilinear interpolation of ``1/D``; needs all four corners valid.

    Inverse depth is affine in the pixel coordinates for any plane, so planar
    surfaces are sampled exactly.
    """
    H, W = D.shape
    u, v = uv[:, 0], uv[:, 1]
    ok = (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    # clamping keeps samples on the last row or column inside a full cell
    u0 = np.minimum(np.floor(np.where(ok, u, 0)).astype(np.int64), W - 2)
    v0 = np.minimum(np.floor(np.where(ok, v, 0)).astype(np.int64), H - 2)
    out = np.zeros(len(u))
    if not ok.any():
        return out, ok
    a, b = u0[ok], v0[ok]
    corners = [(b, a), (b, a + 1), (b + 1, a), (b + 1, a + 1)]
    valid = np.ones(len(a), dtype=bool)
    inv = []
    for r, c in corners:
        z = D.depth[r, c]
        good = D.valid_mask[r, c] & (z > 0)
        valid &= good
        inv.append(np.where(good, 1.0 / np.where(good, z, 1.0), 0.0))
    fu = u[ok] - a
    fv = v[ok] - b
    q = (1 - fv) * ((1 - fu) * inv[0] + fu * inv[1]) + fv * ((1 - fu) * inv[2] + fu * inv[3])
    valid &= q > 0
    out[ok] = np.where(valid, 1.0 / np.where(valid, q, 1.0), 0.0)
    ok[ok] = valid
    return out, ok


def cycle_loss(
    D_a: DepthMap,
    D_b: DepthMap,
    K_a: CameraIntrinsics,
    pose_a: CameraPose,
    K_b: CameraIntrinsics,
    pose_b: CameraPose,
    occlusion_tol: float | None = None,
) -> float:
    """Mean squared pixel displacement after warping view ``a`` into ``b`` and back.

    A pixel takes part when its forward projection lands where ``D_b`` can be
    interpolated and the backward projection lands inside image ``a``. With
    ``occlusion_tol`` set, pixels whose depth in ``b`` differs from the
    sampled ``D_b`` by more than that fraction are treated as occluded and
    skipped.
    """
    H, W = D_a.shape
    u, v = K_a.pixel_grid()
    sel = D_a.valid_mask & (D_a.depth > 0)
    pix = np.stack([u[sel], v[sel]], axis=1).astype(np.float64)
    if len(pix) == 0:
        raise EmptyResultError("view a has no valid depth for the cycle loss")
    Xc = depth_to_points(D_a, K_a)[sel]
    X = pose_a.inverse_transform(Xc)
    uv_b, vis = project(X, K_b, pose_b)
    zb, ok = _bilinear_inverse_depth(D_b, np.where(vis[:, None], uv_b, -1.0))
    ok &= vis
    if occlusion_tol is not None:
        zb_expected = pose_b.transform(X)[:, 2]
        ok &= np.abs(zb - zb_expected) <= occlusion_tol * np.abs(zb_expected)
    rays = np.column_stack([(uv_b[ok, 0] - K_b.cx) / K_b.fx, (uv_b[ok, 1] - K_b.cy) / K_b.fy, np.ones(ok.sum())])
    Xb = pose_b.inverse_transform(rays * zb[ok, None])
    uv_back, vis_back = project(Xb, K_a, pose_a)
    back_in = vis_back & (uv_back[:, 0] >= -0.5) & (uv_back[:, 0] <= W - 0.5) & (uv_back[:, 1] >= -0.5) & (uv_back[:, 1] <= H - 0.5)
    if not back_in.any():
        raise EmptyResultError("no pixel survives the round trip between the two views")
    d = uv_back[back_in] - pix[ok][back_in]
    return _fsum((d * d).sum(axis=1)) / int(back_in.sum())


_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(img1: np.ndarray, img2: np.ndarray, size: int = 11, sigma: float = 1.5, data_range: float = 1.0) -> np.ndarray:
    """Per-pixel, per-channel SSIM with a Gaussian window and zero padding at the border."""
    a = np.asarray(img1, dtype=np.float64)
    b = np.asarray(img2, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"images differ in size: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    win = gaussian_window(size, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    out = np.empty_like(a)
    for c in range(a.shape[-1]):
        x, y = a[..., c], b[..., c]

        def f(z):
            return ndimage.correlate(z, win, mode="constant", cval=0.0)

        mx, my = f(x), f(y)
        sxx = f(x * x) - mx * mx
        syy = f(y * y) - my * my
        sxy = f(x * y) - mx * my
        out[..., c] = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return out if np.ndim(img1) == 3 else out[..., 0]


def ssim(img1: np.ndarray, img2: np.ndarray, size: int = 11, sigma: float = 1.5, data_range: float = 1.0) -> float:
    return float(np.mean(ssim_map(img1, img2, size, sigma, data_range)))


def photometric_loss(rendered: np.ndarray, reference: np.ndarray, lam: float = 0.2) -> float:
    """``(1 - lam) * L1 + lam * (1 - SSIM)``."""
    rendered = np.asarray(rendered, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if rendered.shape != reference.shape:
        raise ConfigError(f"images differ in size: {rendered.shape} vs {reference.shape}")
    l1 = _fsum(np.abs(rendered - reference)) / rendered.size
    if lam == 0:
        return l1
    return (1.0 - lam) * l1 + lam * (1.0 - ssim(rendered, reference))


@dataclass
class LossComponents:
    normal: float = 0.0
    depth: float = 0.0
    ndc: float = 0.0
    cycle: float = 0.0
    photometric: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {"normal": self.normal, "depth": self.depth, "ndc": self.ndc, "cycle": self.cycle, "photometric": self.photometric}


def total_loss(components: LossComponents, cfg: SupervisionConfig | None = None, is_pseudo: bool = False) -> tuple[float, dict]:
    """Weighted sum of the five terms; pseudo views are scaled by ``pseudo_weight``."""
    cfg = cfg or SupervisionConfig()
    c = components
    terms = {
        "normal": cfg.lambda1 * c.normal,
        "depth": cfg.lambda2 * c.depth,
        "ndc": cfg.lambda3 * c.ndc,
        "cycle": cfg.lambda4 * c.cycle,
        "photometric": c.photometric,
    }
    total = terms["normal"] + terms["depth"] + terms["ndc"] + terms["cycle"] + terms["photometric"]
    scale = cfg.pseudo_weight if is_pseudo else 1.0
    if is_pseudo:
        total = scale * total
    breakdown = {"weighted": terms, "raw": c.as_dict(), "scale": scale, "total": total}
    return total, breakdown


@dataclass
class PseudoView:
    pose: CameraPose
    intrinsics: CameraIntrinsics
    depth: DepthMap
    normals: NormalMap
    rgb: np.ndarray | None
    weight: float
    neighbors: tuple[int, int] = (0, 1)
    t: float = 0.5
    sources: dict = field(default_factory=dict)


def interpolate_pose(a: CameraPose, b: CameraPose, t: float) -> CameraPose:
    """Slerp the rotation and move the camera centre linearly from ``a`` (t=0) to ``b`` (t=1)."""
    rots = Rotation.from_matrix(np.stack([a.rotation, b.rotation]))
    R = Slerp([0.0, 1.0], rots)([t]).as_matrix()[0]
    c = (1.0 - t) * a.center + t * b.center
    return CameraPose.from_center(R, c)


def interpolate_intrinsics(a: CameraIntrinsics, b: CameraIntrinsics, t: float) -> CameraIntrinsics:
    if a.shape != b.shape:
        raise ConfigError("neighbouring views must share the image size to interpolate a pseudo view")
    lerp = lambda x, y: (1.0 - t) * x + t * y  # noqa: E731
    return CameraIntrinsics(lerp(a.fx, b.fx), lerp(a.fy, b.fy), lerp(a.cx, b.cx), lerp(a.cy, b.cy), a.width, a.height)


def warp_depth(depth: DepthMap, K_src: CameraIntrinsics, pose_src: CameraPose, K_dst: CameraIntrinsics, pose_dst: CameraPose) -> DepthMap:
    """Forward-warp a depth map into another camera, z-buffered at the nearest pixel."""
    P = depth_to_points(depth, K_src)[depth.valid_mask]
    return project_cloud_depth(pose_src.inverse_transform(P), K_dst, pose_dst)


def fuse_pseudo_depth(sources: list[DepthMap], reference: DepthMap, eps: float = 0.02) -> tuple[DepthMap, np.ndarray]:
    """Mean of the reference and every source within relative deviation ``eps`` of it.

    Returns the fused map and the per-pixel number of retained sources
    (reference included). Pixels without a reference value are invalid.
    """
    ref = reference.depth
    have = reference.valid_mask & (ref > 0)
    total = np.where(have, ref, 0.0)
    count = have.astype(np.int64)
    for s in sources:
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.abs(s.depth - ref) / np.where(have, ref, 1.0)
        keep = have & s.valid_mask & (rel <= eps)
        total = total + np.where(keep, s.depth, 0.0)
        count = count + keep
    valid = count > 0
    return DepthMap(np.where(valid, total / np.maximum(count, 1), 0.0), valid), count


def synthesize_pseudo_views(
    cameras: list[tuple[CameraIntrinsics, CameraPose]],
    depths: list[DepthMap],
    cloud: np.ndarray,
    render_fn=None,
    cfg: SupervisionConfig | None = None,
    closed: bool = False,
    normals: np.ndarray | None = None,
) -> list[PseudoView]:
    """Pseudo views evenly spaced between consecutive real views.

    ``render_fn(K, pose)`` supplies the RGB image, typically a splat render;
    without it the views carry no colour. With ``closed`` the last view is
    also paired with the first. Oriented cloud ``normals`` enable back-face
    culling of the cloud projection.
    """
    cfg = cfg or SupervisionConfig()
    n = len(cameras)
    if n < 2:
        raise ConfigError("pseudo views need at least two real views")
    if len(depths) != n:
        raise ConfigError(f"{len(depths)} depth maps for {n} cameras")
    pairs = [(i, i + 1) for i in range(n - 1)]
    if closed and n > 2:
        pairs.append((n - 1, 0))
    out = []
    for i, j in pairs:
        (Ki, Pi), (Kj, Pj) = cameras[i], cameras[j]
        for k in range(1, cfg.pseudo_view_count + 1):
            t = k / (cfg.pseudo_view_count + 1)
            pose = interpolate_pose(Pi, Pj, t)
            K = interpolate_intrinsics(Ki, Kj, t)
            d1 = warp_depth(depths[i], Ki, Pi, K, pose)
            d2 = warp_depth(depths[j], Kj, Pj, K, pose)
            dw = project_cloud_depth(cloud, K, pose, fill_holes=True, normals=normals)
            D, count = fuse_pseudo_depth([d1, d2], dw, cfg.pseudo_epsilon)
            if not (d1.valid_mask.any() or d2.valid_mask.any()) or not D.valid_mask.any():
                logger.warning("pseudo view between %d and %d at t=%.3f has no overlap; dropped", i, j, t)
                continue
            rgb = None if render_fn is None else render_fn(K, pose)
            out.append(
                PseudoView(
                    pose, K, D, normals_from_depth(D, K), rgb, cfg.pseudo_weight, (i, j), t,
                    {"retained_mean": float(count[D.valid_mask].mean()), "valid": int(D.valid_mask.sum())},
                )
            )
    return out


def nearest_view(center: np.ndarray, cameras: list[tuple[CameraIntrinsics, CameraPose]], exclude: int | None = None) -> int:
    d = [np.inf if i == exclude else float(np.linalg.norm(P.center - center)) for i, (_, P) in enumerate(cameras)]
    return int(np.argmin(d))


def jittered_pose(pose: CameraPose, rng: np.random.Generator, angle_deg: float, target_distance: float) -> CameraPose:
    """Rotate the camera about a point ``target_distance`` ahead of it by a small random angle."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    dR = Rotation.from_rotvec(np.deg2rad(angle_deg) * axis).as_matrix()
    look = pose.rotation.T @ np.array([0.0, 0.0, 1.0])
    pivot = pose.center + target_distance * look
    c = pivot + dR @ (pose.center - pivot)
    return CameraPose.from_center(pose.rotation @ dR.T, c)


def cycle_partner(
    index: int,
    cameras: list[tuple[CameraIntrinsics, CameraPose]],
    rng: np.random.Generator,
    cfg: SupervisionConfig,
    pose: CameraPose | None = None,
    target_distance: float = 1.0,
) -> tuple[str, int | None, CameraPose | None]:
    """Choose the partner view for the cycle loss.

    Pseudo views (``index`` None, ``pose`` given) take the nearest real view.
    Real views flip a seeded coin between a jittered copy of themselves and
    the nearest other real view.
    """
    if index is None:
        return "real", nearest_view(pose.center, cameras), None
    if len(cameras) < 2 or rng.random() < cfg.jitter_probability:
        return "jitter", None, jittered_pose(cameras[index][1], rng, cfg.jitter_angle_deg, target_distance)
    return "real", nearest_view(cameras[index][1].center, cameras, exclude=index), None
