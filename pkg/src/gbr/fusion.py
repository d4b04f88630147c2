"""Truncated signed distance fusion of depth maps and marching-cubes mesh extraction."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from skimage import measure

from .errors import ConfigError
from .geometry import CameraIntrinsics, CameraPose, DepthMap

logger = logging.getLogger(__name__)


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int
    normals: np.ndarray  # (V, 3) unit, pointing out of the surface

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)))

    def __len__(self) -> int:
        return len(self.faces)

    def area(self) -> float:
        if not len(self.faces):
            return 0.0
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        return float(0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1).sum())


@dataclass
class TsdfVolume:
    """Dense grid of signed distances sampled at the nodes ``origin + voxel_size * index``.

    ``tsdf`` holds distances divided by the truncation, so it lies in
    [-1, 1]; unobserved nodes keep weight 0 and value 1.
    """

    origin: np.ndarray
    voxel_size: float
    dims: tuple[int, int, int]
    truncation: float
    tsdf: np.ndarray
    weights: np.ndarray

    @classmethod
    def create(cls, origin, voxel_size: float, dims, truncation: float | None = None) -> "TsdfVolume":
        if voxel_size <= 0:
            raise ConfigError(f"voxel_size must be positive, got {voxel_size}")
        dims = tuple(int(d) for d in dims)
        if len(dims) != 3 or min(dims) < 2:
            raise ConfigError(f"volume needs at least 2 nodes per axis, got {dims}")
        truncation = 5.0 * voxel_size if truncation is None else float(truncation)
        if truncation < 2.0 * voxel_size:
            raise ConfigError(f"truncation {truncation:g} is below two voxels ({2 * voxel_size:g})")
        return cls(
            np.asarray(origin, dtype=np.float64).reshape(3),
            float(voxel_size),
            dims,
            truncation,
            np.ones(dims),
            np.zeros(dims),
        )

    @classmethod
    def from_bounds(cls, lo, hi, voxel_size: float | None = None, truncation: float | None = None, margin: float | None = None):
        """Volume covering ``[lo, hi]`` plus a margin (default: the truncation distance).

        The default voxel size is the bounding-box diagonal over 256.
        """
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        diag = float(np.linalg.norm(hi - lo))
        if not diag > 0:
            raise ConfigError("degenerate bounding box for the fusion volume")
        voxel_size = diag / 256.0 if voxel_size is None else float(voxel_size)
        trunc = 5.0 * voxel_size if truncation is None else float(truncation)
        margin = trunc + voxel_size if margin is None else float(margin)
        lo = lo - margin
        dims = np.ceil((hi + margin - lo) / voxel_size).astype(int) + 1
        return cls.create(lo, voxel_size, dims, trunc)

    def node_positions(self) -> np.ndarray:
        axes = [self.origin[k] + self.voxel_size * np.arange(self.dims[k]) for k in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def meta(self) -> dict:
        return {
            "origin": self.origin.tolist(),
            "voxel_size": self.voxel_size,
            "dims": list(self.dims),
            "truncation": self.truncation,
            "observed_nodes": int((self.weights > 0).sum()),
        }


def _sample_depth(depth: DepthMap, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear depth where all four surrounding pixels are valid, nearest pixel elsewhere."""
    H, W = depth.shape
    Z, M = depth.depth, depth.valid_mask
    ui = np.rint(u).astype(np.int64)
    vi = np.rint(v).astype(np.int64)
    inside = (ui >= 0) & (ui < W) & (vi >= 0) & (vi < H)
    ui_c, vi_c = np.clip(ui, 0, W - 1), np.clip(vi, 0, H - 1)
    z = np.where(inside, Z[vi_c, ui_c], 0.0)
    ok = inside & M[vi_c, ui_c]

    u0 = np.clip(np.floor(u).astype(np.int64), 0, W - 2)
    v0 = np.clip(np.floor(v).astype(np.int64), 0, H - 2)
    fu = u - u0
    fv = v - v0
    interior = inside & (fu >= 0) & (fu <= 1) & (fv >= 0) & (fv <= 1)
    interior &= M[v0, u0] & M[v0, u0 + 1] & M[v0 + 1, u0] & M[v0 + 1, u0 + 1]
    zb = (1 - fv) * ((1 - fu) * Z[v0, u0] + fu * Z[v0, u0 + 1]) + fv * ((1 - fu) * Z[v0 + 1, u0] + fu * Z[v0 + 1, u0 + 1])
    return np.where(interior, zb, z), ok | interior


def integrate(volume: TsdfVolume, depth: DepthMap, K: CameraIntrinsics, pose: CameraPose, sky: np.ndarray | None = None) -> int:
    """Fuse one depth map into ``volume`` in place; returns the number of nodes updated.

    Each node takes the signed distance ``depth(pixel) - z`` along the
    camera axis, clamped to the truncation band. Nodes further than the
    truncation behind the surface are left alone, as are sky pixels.
    """
    if depth.shape != K.shape:
        raise ConfigError(f"depth map {depth.shape} does not match the camera {K.shape}")
    mask = depth.valid_mask & (depth.depth > 0)
    if sky is not None:
        mask = mask & ~np.asarray(sky, dtype=bool)
    if not mask.any():
        return 0
    D = DepthMap(np.where(mask, depth.depth, 0.0), mask)
    nx, ny, nz = volume.dims
    gy, gz = np.meshgrid(
        volume.origin[1] + volume.voxel_size * np.arange(ny), volume.origin[2] + volume.voxel_size * np.arange(nz), indexing="ij"
    )
    slab = max(1, int(4_000_000 // (ny * nz)))
    updated = 0
    for x0 in range(0, nx, slab):
        xs = volume.origin[0] + volume.voxel_size * np.arange(x0, min(x0 + slab, nx))
        X = np.empty((len(xs), ny, nz, 3))
        X[..., 0] = xs[:, None, None]
        X[..., 1] = gy
        X[..., 2] = gz
        updated += _integrate_nodes(volume, X.reshape(-1, 3), slice(x0, x0 + len(xs)), D, K, pose)
    return updated


def _integrate_nodes(volume: TsdfVolume, X: np.ndarray, xs: slice, D: DepthMap, K: CameraIntrinsics, pose: CameraPose) -> int:
    Xc = pose.transform(X)
    z = Xc[:, 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    u = K.fx * Xc[:, 0] / zs + K.cx
    v = K.fy * Xc[:, 1] / zs + K.cy
    d, ok = _sample_depth(D, u, v)
    ok &= front
    sd = d - z
    tr = volume.truncation
    ok &= sd >= -tr
    if not ok.any():
        return 0
    obs = np.clip(sd[ok], -tr, tr) / tr
    T = volume.tsdf[xs].reshape(-1)
    Wt = volume.weights[xs].reshape(-1)
    idx = np.flatnonzero(ok)
    w = Wt[idx]
    T[idx] = (T[idx] * w + obs) / (w + 1.0)
    Wt[idx] = w + 1.0
    volume.tsdf[xs] = T.reshape(volume.tsdf[xs].shape)
    volume.weights[xs] = Wt.reshape(volume.weights[xs].shape)
    return int(len(idx))


def fuse_depths(
    depths: list[DepthMap],
    cameras: list[tuple[CameraIntrinsics, CameraPose]],
    volume: TsdfVolume,
    skies: list[np.ndarray | None] | None = None,
) -> TsdfVolume:
    if len(depths) != len(cameras):
        raise ConfigError(f"{len(depths)} depth maps for {len(cameras)} cameras")
    for i, (D, (K, P)) in enumerate(zip(depths, cameras)):
        n = integrate(volume, D, K, P, None if skies is None else skies[i])
        logger.debug("view %d updated %d nodes", i, n)
    return volume


def extract_mesh(volume: TsdfVolume) -> TriangleMesh:
    """Zero level set of the tsdf, skipping cells that touch an unobserved node.

    Normals follow the tsdf gradient, so they point from inside to outside.
    """
    T, Wt = volume.tsdf, volume.weights
    seen = Wt > 0
    # a cell is usable when all eight of its corner nodes were observed
    cell = seen[:-1, :-1, :-1] & seen[1:, :-1, :-1] & seen[:-1, 1:, :-1] & seen[:-1, :-1, 1:]
    cell &= seen[1:, 1:, :-1] & seen[1:, :-1, 1:] & seen[:-1, 1:, 1:] & seen[1:, 1:, 1:]
    if not cell.any():
        return TriangleMesh.empty()
    corner_vals = np.stack(
        [T[a : T.shape[0] - 1 + a, b : T.shape[1] - 1 + b, c : T.shape[2] - 1 + c] for a in (0, 1) for b in (0, 1) for c in (0, 1)]
    )
    crossing = cell & (corner_vals.min(axis=0) <= 0) & (corner_vals.max(axis=0) >= 0)
    if not crossing.any():
        return TriangleMesh.empty()
    mask = np.zeros(T.shape, dtype=bool)
    mask[:-1, :-1, :-1] = cell
    try:
        verts, faces, normals, _ = measure.marching_cubes(T, level=0.0, spacing=(volume.voxel_size,) * 3, mask=mask)
    except (ValueError, RuntimeError) as exc:
        logger.warning("marching cubes found no surface: %s", exc)
        return TriangleMesh.empty()
    # skimage's mask does not look at every corner, so drop faces in cells that touch unobserved nodes
    centroid_cell = np.floor(verts[faces].mean(axis=1) / volume.voxel_size).astype(int)
    centroid_cell = np.clip(centroid_cell, 0, np.array(cell.shape) - 1)
    faces = faces[cell[centroid_cell[:, 0], centroid_cell[:, 1], centroid_cell[:, 2]]]
    if not len(faces):
        return TriangleMesh.empty()
    used, faces = np.unique(faces, return_inverse=True)
    faces = faces.reshape(-1, 3)
    verts, normals = verts[used], normals[used]
    verts = verts + volume.origin
    # recompute normals from the trilinear tsdf gradient so the sign convention is ours
    g = np.stack(np.gradient(T, volume.voxel_size), axis=-1)
    idx = np.clip(np.rint((verts - volume.origin) / volume.voxel_size).astype(int), 0, np.array(volume.dims) - 1)
    n = g[idx[:, 0], idx[:, 1], idx[:, 2]]
    flip = np.einsum("ij,ij->i", n, normals) < 0
    normals = np.where(flip[:, None], -normals, normals)
    norm = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = normals / np.where(norm > 0, norm, 1.0)
    return TriangleMesh(verts, faces.astype(np.int64), normals)
