"""Software rasteriser for 3D Gaussian primitives: colour, normal, plane distance and depth maps.

Primitives are composited front to back in order of the camera-frame depth
of their centres. Normals are the rotated minimum-scale axis, flipped to face
the camera, so a primitive's plane in camera coordinates is ``n . X = d`` with
``d = mu_cam . n_cam``. Depth is the intersection of each pixel ray with the
blended plane: ``z = (D / A) / (n_hat . K^-1 [u, v, 1])`` where ``D`` and ``A``
are the blended distance and opacity.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError
from .geometry import CameraIntrinsics, CameraPose, DepthMap, GaussianPrimitive, NormalMap, pca_normals, quaternion_from_matrix

logger = logging.getLogger(__name__)


@dataclass
class SplatScene:
    primitives: list[GaussianPrimitive]
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)

    def __len__(self) -> int:
        return len(self.primitives)

    def arrays(self) -> dict[str, np.ndarray]:
        P = self.primitives
        return {
            "position": np.array([g.position for g in P]).reshape(-1, 3),
            "rotation": np.array([g.rotation for g in P]).reshape(-1, 4),
            "scale": np.array([g.scale for g in P]).reshape(-1, 3),
            "opacity": np.array([g.opacity for g in P], dtype=np.float64),
            "color": np.array([g.color for g in P]).reshape(-1, 3),
        }


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    normal: NormalMap  # camera frame, unit where valid
    distance: np.ndarray  # (H, W) blended plane distance
    depth: DepthMap
    alpha: np.ndarray  # (H, W) accumulated opacity
    normal_raw: np.ndarray | None = None  # blended, unnormalised normals


@dataclass
class ProjectedGaussian:
    mean: np.ndarray  # (2,) pixel
    cov: np.ndarray  # (2, 2) px^2, including the floor
    depth: float  # camera-frame z of the centre
    normal: np.ndarray  # camera-frame, facing the camera
    distance: float  # mu_cam . n_cam


def project_gaussian(
    g: GaussianPrimitive,
    K: CameraIntrinsics,
    pose: CameraPose,
    cov_floor: float = 0.3,
    near: float = 0.01,
    cull_backface: bool = False,
) -> ProjectedGaussian | None:
    """Screen-space footprint of ``g``.

    ``None`` when its centre is closer than ``near``, or, with
    ``cull_backface``, when its stored normal points away from the camera.
    """
    mu = pose.transform(g.position)
    x, y, z = mu
    if z <= near:
        return None
    if cull_backface and (pose.rotation @ g.normal) @ mu >= 0:
        return None
    J = np.array([[K.fx / z, 0.0, -K.fx * x / z**2], [0.0, K.fy / z, -K.fy * y / z**2]])
    W = pose.rotation
    cov = J @ W @ g.covariance @ W.T @ J.T
    cov = 0.5 * (cov + cov.T) + cov_floor * np.eye(2)
    mean = np.array([K.fx * x / z + K.cx, K.fy * y / z + K.cy])
    n = W @ g.normal
    if n @ mu > 0:
        n = -n
    return ProjectedGaussian(mean, cov, float(z), n, float(mu @ n))


def _draw_order(arrays: dict[str, np.ndarray], depths: np.ndarray) -> np.ndarray:
    """Front-to-back order that depends only on primitive content, not storage order."""
    keys = [np.arange(len(depths))]  # last resort: only exact duplicates reach it
    for name in ("color", "opacity", "scale", "rotation", "position"):
        a = arrays[name]
        keys.extend(a.T[::-1] if a.ndim == 2 else [a])
    keys.append(depths)
    return np.lexsort(keys)


def render(
    scene: SplatScene,
    K: CameraIntrinsics,
    pose: CameraPose,
    cov_floor: float = 0.3,
    min_transmittance: float = 1e-4,
    alpha_min: float = 1.0 / 255.0,
    depth_alpha: float = 0.5,
    cull_backface: bool = False,
) -> RenderOutput:
    """Alpha-composite ``scene`` as seen by camera ``(K, pose)``.

    A pixel stops accepting primitives once its transmittance falls below
    ``min_transmittance``. Contributions with opacity under ``alpha_min`` are
    skipped; set it to 0 to evaluate every Gaussian over the whole image.
    ``cull_backface`` drops primitives whose stored normal faces away from
    the camera, which only makes sense for consistently oriented scenes.
    """
    if len(scene) == 0:
        raise ConfigError("cannot render an empty scene")
    H, W = K.shape
    arrays = scene.arrays()
    proj = [project_gaussian(g, K, pose, cov_floor, cull_backface=cull_backface) for g in scene.primitives]
    depths = np.array([np.inf if p is None else p.depth for p in proj])
    order = [i for i in _draw_order(arrays, depths) if proj[i] is not None]

    color = np.zeros((H, W, 3))
    normal = np.zeros((H, W, 3))
    dist = np.zeros((H, W))
    T = np.ones((H, W))
    done = np.zeros((H, W), dtype=bool)
    for i in order:
        p = proj[i]
        g = scene.primitives[i]
        if g.opacity <= 0:
            continue
        inv = np.linalg.inv(p.cov)
        if alpha_min > 0:
            if g.opacity < alpha_min:
                continue
            # beyond this Mahalanobis radius the opacity drops below alpha_min
            r = np.sqrt(2.0 * np.log(g.opacity / alpha_min))
            half = r * np.sqrt(np.diag(p.cov))
            u0 = max(int(np.floor(p.mean[0] - half[0])), 0)
            u1 = min(int(np.ceil(p.mean[0] + half[0])), W - 1)
            v0 = max(int(np.floor(p.mean[1] - half[1])), 0)
            v1 = min(int(np.ceil(p.mean[1] + half[1])), H - 1)
            if u0 > u1 or v0 > v1:
                continue
        else:
            u0, u1, v0, v1 = 0, W - 1, 0, H - 1
        du = np.arange(u0, u1 + 1) - p.mean[0]
        dv = np.arange(v0, v1 + 1) - p.mean[1]
        power = -0.5 * (inv[0, 0] * du[None, :] ** 2 + 2 * inv[0, 1] * du[None, :] * dv[:, None] + inv[1, 1] * dv[:, None] ** 2)
        alpha = np.minimum(g.opacity * np.exp(power), 1.0)
        sl = (slice(v0, v1 + 1), slice(u0, u1 + 1))
        active = (alpha >= alpha_min) & ~done[sl]
        if not active.any():
            continue
        w = np.where(active, alpha * T[sl], 0.0)
        color[sl] += w[..., None] * np.asarray(g.color)
        normal[sl] += w[..., None] * p.normal
        dist[sl] += w * p.distance
        T[sl] = np.where(active, T[sl] * (1.0 - alpha), T[sl])
        done[sl] |= active & (T[sl] < min_transmittance)

    A = 1.0 - T
    color = color + T[..., None] * scene.background
    nn = np.linalg.norm(normal, axis=-1)
    nvalid = nn > 1e-12
    n_hat = np.where(nvalid[..., None], normal / np.where(nvalid, nn, 1.0)[..., None], 0.0)
    denom = np.einsum("hwc,hwc->hw", n_hat, K.rays())
    dvalid = (A > depth_alpha) & nvalid & (np.abs(denom) > 1e-12)
    z = np.where(dvalid, (dist / np.where(dvalid, A, 1.0)) / np.where(dvalid, denom, 1.0), 0.0)
    dvalid &= z > 0
    return RenderOutput(
        color=color,
        normal=NormalMap(n_hat, nvalid & (A > depth_alpha)),
        distance=dist,
        depth=DepthMap(np.where(dvalid, z, 0.0), dvalid),
        alpha=A,
        normal_raw=normal,
    )


def splats_from_cloud(
    points: np.ndarray,
    colors: np.ndarray | None = None,
    k: int = 8,
    flatness: float = 0.1,
    opacity: float = 0.9,
    scale_factor: float = 0.7,
    normals: np.ndarray | None = None,
) -> SplatScene:
    """Flat Gaussians at cloud points, oriented by local PCA.

    The smallest principal direction of the ``k`` nearest neighbours becomes
    the minimum-scale axis; the in-plane scales follow the neighbour spacing.
    Given oriented ``normals``, each primitive's normal axis is flipped to
    agree with them.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) < 3:
        raise ConfigError("need at least 3 points to initialise splats")
    k = min(k, len(points) - 1)
    dist, _ = cKDTree(points).query(points, k=k + 1)
    _, vecs = pca_normals(points, k)  # ascending eigenvalues; column 0 is the normal
    spacing = np.maximum(dist[:, 1:].mean(axis=1), 1e-9)
    if colors is None:
        colors = np.full((len(points), 3), 0.5)
    prims = []
    for i in range(len(points)):
        R = vecs[i][:, [1, 2, 0]]  # local x, y in-plane, z along the normal
        if normals is not None and R[:, 2] @ normals[i] < 0:
            R[:, 2] = -R[:, 2]
        if np.linalg.det(R) < 0:
            R[:, 0] = -R[:, 0]
        s = scale_factor * spacing[i]
        prims.append(
            GaussianPrimitive(
                points[i], quaternion_from_matrix(R), np.array([s, s, flatness * s]), opacity, np.clip(colors[i], 0, 1)
            )
        )
    return SplatScene(prims)
