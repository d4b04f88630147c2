"""Camera, transform and raster primitives shared across the package.

Conventions used everywhere:

* ``CameraPose`` maps world to camera: ``x_cam = R @ x_world + t``.
* Rasters are row-major with the origin at the top-left pixel; pixel
  centres sit on integer coordinates, ``u`` is the column and ``v`` the row.
* Depth is camera-frame ``z``, never ray length.
* Normal maps are expressed in the camera frame of the view they belong to.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

ORTHO_TOL = 1e-9


def _check_rotation(R: np.ndarray, name: str = "rotation") -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ValueError(f"{name} must be 3x3, got {R.shape}")
    if not np.all(np.isfinite(R)):
        raise ValueError(f"{name} contains non-finite values")
    err = np.abs(R.T @ R - np.eye(3)).max()
    if err > ORTHO_TOL or np.linalg.det(R) <= 0:
        raise ValueError(f"{name} is not a proper rotation (|RtR-I|={err:.3g})")
    return R


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrices for ``(..., 3)`` vectors."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def rotvec_to_matrix(w: np.ndarray) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(w, dtype=np.float64)).as_matrix()


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Closest proper rotation to ``R`` (polar decomposition via SVD)."""
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(np.isfinite(vals)):
            raise ValueError("intrinsics must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside image")

    @classmethod
    def centered(cls, focal: float, width: int, height: int) -> "CameraIntrinsics":
        """Square pixels with the principal point at ``(W/2, H/2)``."""
        return cls(float(focal), float(focal), width / 2.0, height / 2.0, int(width), int(height))

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def inverse_matrix(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def with_focal(self, fx: float, fy: float | None = None) -> "CameraIntrinsics":
        return CameraIntrinsics(fx, fx if fy is None else fy, self.cx, self.cy, self.width, self.height)

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """``(u, v)`` coordinate rasters of shape ``(H, W)``."""
        v, u = np.mgrid[0 : self.height, 0 : self.width]
        return u.astype(np.float64), v.astype(np.float64)

    def rays(self) -> np.ndarray:
        """``K^-1 [u, v, 1]`` for every pixel, shape ``(H, W, 3)``; z-component is 1."""
        u, v = self.pixel_grid()
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(_check_rotation(self.rotation)))
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise ValueError("translation must be a finite 3-vector")
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_center(cls, rotation: np.ndarray, center: np.ndarray) -> "CameraPose":
        R = np.asarray(rotation, dtype=np.float64)
        return cls(R, -R @ np.asarray(center, dtype=np.float64))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "CameraPose":
        """Camera at ``eye`` looking at ``target``; image ``v`` grows along ``-up``."""
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(x) < 1e-12:
            raise ValueError("look_at: up vector parallel to viewing direction")
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        return cls.from_center(np.stack([x, y, z]), eye)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def transform(self, points: np.ndarray) -> np.ndarray:
        """World points ``(..., 3)`` into the camera frame."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse_transform(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def inverse(self) -> "CameraPose":
        return CameraPose(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "CameraPose") -> "CameraPose":
        """``self ∘ other``: apply ``other`` first."""
        return CameraPose(
            orthonormalize(self.rotation @ other.rotation),
            self.rotation @ other.translation + self.translation,
        )

    def as_similarity(self) -> "SimilarityTransform":
        return SimilarityTransform(1.0, self.rotation, self.translation)


@dataclass(frozen=True)
class SimilarityTransform:
    """``x -> scale * R @ x + t``. A rigid transform is the ``scale == 1`` case."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", _frozen(_check_rotation(self.rotation)))
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise ValueError("translation must be a finite 3-vector")
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(3), np.zeros(3))

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.scale * self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(points, dtype=np.float64) @ self.rotation.T) + self.translation

    __call__ = apply

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """``self ∘ other``: apply ``other`` first."""
        return SimilarityTransform(
            self.scale * other.scale,
            orthonormalize(self.rotation @ other.rotation),
            self.scale * (self.rotation @ other.translation) + self.translation,
        )

    def inverse(self) -> "SimilarityTransform":
        Rt = self.rotation.T
        return SimilarityTransform(1.0 / self.scale, Rt, -(Rt @ self.translation) / self.scale)

    def apply_to_pose(self, pose: CameraPose) -> CameraPose:
        """Pose of the same camera after moving the whole world by ``self``.

        Camera coordinates come out scaled by ``self.scale``, which projection ignores.
        """
        R = pose.rotation @ self.rotation.T
        c = self.apply(pose.center)
        return CameraPose.from_center(orthonormalize(R), c)


def umeyama(src, dst, weights=None, with_scale: bool = True) -> SimilarityTransform:
    """Weighted least-squares similarity ``T`` minimising ``sum w ||dst - T(src)||^2``.

    Rows with zero weight do not influence the result.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ValueError("umeyama: point sets differ in size")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    keep = w > 0
    if keep.sum() < 3:
        raise ValueError("umeyama needs at least 3 weighted correspondences")
    src, dst, w = src[keep], dst[keep], w[keep]
    w = w / w.sum()
    mu_s = w @ src
    mu_d = w @ dst
    xs = src - mu_s
    xd = dst - mu_d
    cov = (xd * w[:, None]).T @ xs
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_s = float(w @ np.einsum("ij,ij->i", xs, xs))
        if var_s <= 0:
            raise ValueError("umeyama: degenerate source configuration")
        scale = float(np.trace(np.diag(D) @ S) / var_s)
    else:
        scale = 1.0
    t = mu_d - scale * R @ mu_s
    return SimilarityTransform(scale, orthonormalize(R), t)


@dataclass(frozen=True)
class PointMapFrame:
    """Per-pixel 3D points with confidence for one image.

    ``reference_frame`` is the view index whose camera frame the points are
    expressed in, or ``-1`` for the unified world frame.
    """

    points: np.ndarray
    confidence: np.ndarray
    frame_id: int
    reference_frame: int = -1

    def __post_init__(self):
        P = np.array(self.points, dtype=np.float64)
        C = np.array(self.confidence, dtype=np.float64)
        if P.ndim != 3 or P.shape[2] != 3:
            raise ValueError(f"points must be HxWx3, got {P.shape}")
        if C.shape != P.shape[:2]:
            raise ValueError(f"confidence {C.shape} does not match points {P.shape[:2]}")
        C = np.where(np.isfinite(C), np.maximum(C, 0.0), 0.0)
        bad = ~np.all(np.isfinite(P), axis=-1)
        C[bad] = 0.0
        P[bad] = np.nan
        P.setflags(write=False)
        C.setflags(write=False)
        object.__setattr__(self, "points", P)
        object.__setattr__(self, "confidence", C)

    @property
    def shape(self) -> tuple[int, int]:
        return self.points.shape[:2]

    def transformed(self, T: SimilarityTransform, reference_frame: int = -1) -> "PointMapFrame":
        return PointMapFrame(T.apply(self.points), self.confidence, self.frame_id, reference_frame)


@dataclass(frozen=True)
class DepthMap:
    depth: np.ndarray
    valid_mask: np.ndarray
    filled_mask: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        D = np.array(self.depth, dtype=np.float64)
        M = np.array(self.valid_mask, dtype=bool)
        if D.ndim != 2 or M.shape != D.shape:
            raise ValueError("depth and mask must be matching 2-D rasters")
        M &= np.isfinite(D) & (D > 0)
        D[~M] = 0.0
        D.setflags(write=False)
        M.setflags(write=False)
        object.__setattr__(self, "depth", D)
        object.__setattr__(self, "valid_mask", M)

    @classmethod
    def from_array(cls, depth: np.ndarray) -> "DepthMap":
        depth = np.asarray(depth, dtype=np.float64)
        return cls(depth, np.isfinite(depth) & (depth > 0))

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    def mean(self) -> float:
        return float(self.depth[self.valid_mask].mean()) if self.valid_mask.any() else float("nan")


@dataclass(frozen=True)
class NormalMap:
    normals: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self):
        N = np.array(self.normals, dtype=np.float64)
        M = np.array(self.valid_mask, dtype=bool)
        if N.ndim != 3 or N.shape[2] != 3 or M.shape != N.shape[:2]:
            raise ValueError("normals must be HxWx3 with an HxW mask")
        N[~M] = 0.0
        if M.any():
            norms = np.linalg.norm(N[M], axis=-1)
            if np.abs(norms - 1).max() > 1e-6:
                raise ValueError("valid normals must be unit length")
        N.setflags(write=False)
        M.setflags(write=False)
        object.__setattr__(self, "normals", N)
        object.__setattr__(self, "valid_mask", M)


@dataclass(frozen=True)
class GaussianPrimitive:
    """Anisotropic 3D Gaussian; ``rotation`` is a unit quaternion ``(w, x, y, z)``."""

    position: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: float
    color: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        if abs(np.linalg.norm(q) - 1) > 1e-9:
            raise ValueError("rotation quaternion must be unit norm")
        s = np.asarray(self.scale, dtype=np.float64).reshape(3)
        if np.any(s <= 0):
            raise ValueError("scales must be positive")
        if not 0 <= self.opacity <= 1:
            raise ValueError("opacity must lie in [0, 1]")
        c = np.asarray(self.color, dtype=np.float64).reshape(3)
        if np.any(c < 0) or np.any(c > 1):
            raise ValueError("color must lie in [0, 1]")
        object.__setattr__(self, "position", _frozen(np.asarray(self.position, dtype=np.float64).reshape(3)))
        object.__setattr__(self, "rotation", _frozen(q))
        object.__setattr__(self, "scale", _frozen(s))
        object.__setattr__(self, "color", _frozen(c))
        object.__setattr__(self, "opacity", float(self.opacity))

    @property
    def rotation_matrix(self) -> np.ndarray:
        w, x, y, z = self.rotation
        return Rotation.from_quat([x, y, z, w]).as_matrix()

    @property
    def covariance(self) -> np.ndarray:
        R = self.rotation_matrix
        S = np.diag(self.scale)
        return R @ S @ S.T @ R.T

    @property
    def normal(self) -> np.ndarray:
        """World-space axis of the smallest scale."""
        return self.rotation_matrix[:, int(np.argmin(self.scale))]


def quaternion_from_matrix(R: np.ndarray) -> np.ndarray:
    x, y, z, w = Rotation.from_matrix(R).as_quat()
    q = np.array([w, x, y, z])
    return q / np.linalg.norm(q)


def project(points, K: CameraIntrinsics, pose: CameraPose, min_depth: float = 1e-9):
    """Project world points to pixels.

    Returns ``(pixels, visible)`` where ``visible`` is false for points at or
    behind ``min_depth`` in the camera frame; their pixels are NaN.
    """
    X = pose.transform(points)
    z = X[..., 2]
    visible = z > min_depth
    safe_z = np.where(visible, z, 1.0)
    uv = np.stack([K.fx * X[..., 0] / safe_z + K.cx, K.fy * X[..., 1] / safe_z + K.cy], axis=-1)
    uv = np.where(visible[..., None], uv, np.nan)
    return uv, visible


def unproject(pixels, depth, K: CameraIntrinsics, pose: CameraPose | None = None) -> np.ndarray:
    """Lift pixels with z-depth to world points (camera frame if ``pose`` is None)."""
    pixels = np.asarray(pixels, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise ValueError("unproject requires positive depth")
    x = (pixels[..., 0] - K.cx) / K.fx * depth
    y = (pixels[..., 1] - K.cy) / K.fy * depth
    X = np.stack([x, y, np.broadcast_to(depth, x.shape)], axis=-1)
    return X if pose is None else pose.inverse_transform(X)


def depth_to_points(depth: DepthMap, K: CameraIntrinsics) -> np.ndarray:
    """Camera-frame points for every pixel, NaN where depth is invalid."""
    X = K.rays() * depth.depth[..., None]
    X[~depth.valid_mask] = np.nan
    return X


def normals_from_depth(depth: DepthMap, K: CameraIntrinsics) -> NormalMap:
    """Camera-frame normals from the four direct neighbours of each pixel.

    ``n = (p_down - p_up) x (p_right - p_left)`` normalised, which points
    towards the camera for visible surfaces.
    """
    H, W = depth.shape
    P = depth_to_points(depth, K)
    valid = depth.valid_mask
    N = np.zeros((H, W, 3))
    mask = np.zeros((H, W), dtype=bool)
    if H >= 3 and W >= 3:
        up, down = P[:-2, 1:-1], P[2:, 1:-1]
        left, right = P[1:-1, :-2], P[1:-1, 2:]
        n = np.cross(down - up, right - left)
        ok = (
            valid[1:-1, 1:-1] & valid[:-2, 1:-1] & valid[2:, 1:-1] & valid[1:-1, :-2] & valid[1:-1, 2:]
        )
        norm = np.linalg.norm(np.where(ok[..., None], n, 0.0), axis=-1)
        ok &= norm > 1e-12
        n = np.where(ok[..., None], n / np.where(ok, norm, 1.0)[..., None], 0.0)
        N[1:-1, 1:-1] = n
        mask[1:-1, 1:-1] = ok
    return NormalMap(N, mask)


def pca_normals(points: np.ndarray, k: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Unoriented normals from the smallest principal axis of each point's ``k`` neighbours.

    Also returns the full eigenvector frames (columns in ascending eigenvalue
    order) so callers can reuse the in-plane axes.
    """
    from scipy.spatial import cKDTree

    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) < 3:
        raise ValueError("need at least 3 points to estimate normals")
    k = min(k, len(points) - 1)
    _, idx = cKDTree(points).query(points, k=k + 1)
    nbr = points[idx]
    centred = nbr - nbr.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centred, centred) / k
    _, vecs = np.linalg.eigh(cov)
    return vecs[:, :, 0].copy(), vecs


def orient_normals(normals: np.ndarray, points: np.ndarray, view_directions: np.ndarray) -> np.ndarray:
    """Flip each normal to agree with its summed point-to-camera direction."""
    flip = np.einsum("ij,ij->i", normals, view_directions) < 0
    return np.where(flip[:, None], -normals, normals)
