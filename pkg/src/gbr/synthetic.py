"""Synthetic scenes with exact ground truth, and providers of refined depth candidates.

The generator ray-casts an analytic surface from a ring of cameras and
emits the same files a point-map estimator would produce, with a declared
noise model. Everything is a pure function of the seeds in the spec.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, EmptyResultError
from .geometry import CameraIntrinsics, CameraPose, DepthMap, PointMapFrame
from .io import SceneBundle, ViewData, complete_pairs, read_raw

logger = logging.getLogger(__name__)

SKY_COLOR = np.array([0.62, 0.78, 0.95])


# --- analytic surfaces -----------------------------------------------------


class Sphere:
    kind = "sphere"

    def __init__(self, radius: float = 1.0, center=(0.0, 0.0, 0.0)):
        self.radius = float(radius)
        self.center = np.asarray(center, dtype=np.float64)

    def raycast(self, origin, dirs):
        """Ray parameters of the first hit (``inf`` on a miss) and unit normals."""
        oc = np.asarray(origin, dtype=np.float64) - self.center
        a = np.einsum("...i,...i->...", dirs, dirs)
        b = 2.0 * np.einsum("...i,...i->...", dirs, oc)
        c = oc @ oc - self.radius**2
        disc = b * b - 4 * a * c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t = (-b - sq) / (2 * a)
        hit &= t > 0
        t = np.where(hit, t, np.inf)
        P = origin + np.where(hit, t, 0.0)[..., None] * dirs
        n = (P - self.center) / self.radius
        return t, n

    def signed_distance(self, points):
        return np.linalg.norm(np.asarray(points) - self.center, axis=-1) - self.radius

    def mesh(self, subdivisions: int = 4):
        V, F = _icosphere(subdivisions)
        return V * self.radius + self.center, F

    def bounds(self):
        return self.center - self.radius, self.center + self.radius


class Heightfield:
    """``z = h(x, y)`` over ``|x|, |y| <= extent``; flat when ``bumps`` is empty."""

    def __init__(self, bumps=(), extent: float = 4.0):
        self.bumps = [tuple(map(float, b)) for b in bumps]  # (cx, cy, amplitude, width)
        self.extent = float(extent)
        self.kind = "heightfield" if self.bumps else "plane"

    def height(self, x, y):
        h = np.zeros(np.broadcast(x, y).shape)
        for cx, cy, amp, width in self.bumps:
            h += amp * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * width**2))
        return h

    def gradient(self, x, y):
        gx = np.zeros(np.broadcast(x, y).shape)
        gy = np.zeros_like(gx)
        for cx, cy, amp, width in self.bumps:
            e = amp * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * width**2))
            gx -= e * (x - cx) / width**2
            gy -= e * (y - cy) / width**2
        return gx, gy

    def raycast(self, origin, dirs):
        o = np.asarray(origin, dtype=np.float64)
        d = np.asarray(dirs, dtype=np.float64)
        dz = np.where(np.abs(d[..., 2]) > 1e-12, d[..., 2], -1e-12)
        t = -o[2] / dz
        for _ in range(200):
            x = o[0] + t * d[..., 0]
            y = o[1] + t * d[..., 1]
            t_new = (self.height(x, y) - o[2]) / dz
            if np.nanmax(np.abs(t_new - t)) < 1e-14:
                t = t_new
                break
            t = t_new
        # Newton polish on g(t) = o_z + t d_z - h(o + t d)
        for _ in range(3):
            x = o[0] + t * d[..., 0]
            y = o[1] + t * d[..., 1]
            gx, gy = self.gradient(x, y)
            g = o[2] + t * d[..., 2] - self.height(x, y)
            dg = d[..., 2] - gx * d[..., 0] - gy * d[..., 1]
            t = t - g / np.where(np.abs(dg) > 1e-12, dg, 1e-12)
        x = o[0] + t * d[..., 0]
        y = o[1] + t * d[..., 1]
        hit = (t > 0) & (np.abs(x) <= self.extent) & (np.abs(y) <= self.extent) & np.isfinite(t)
        gx, gy = self.gradient(x, y)
        n = np.stack([-gx, -gy, np.ones_like(gx)], axis=-1)
        n /= np.linalg.norm(n, axis=-1, keepdims=True)
        return np.where(hit, t, np.inf), n

    def signed_distance(self, points):
        # vertical offset scaled by the slope; exact for the plane
        p = np.asarray(points)
        gx, gy = self.gradient(p[..., 0], p[..., 1])
        return (p[..., 2] - self.height(p[..., 0], p[..., 1])) / np.sqrt(1 + gx**2 + gy**2)

    def mesh(self, resolution: int = 200):
        s = np.linspace(-self.extent, self.extent, resolution + 1)
        X, Y = np.meshgrid(s, s, indexing="ij")
        V = np.stack([X, Y, self.height(X, Y)], axis=-1).reshape(-1, 3)
        idx = np.arange((resolution + 1) ** 2).reshape(resolution + 1, resolution + 1)
        a, b = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
        c, d = idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
        F = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
        return V, F

    def bounds(self):
        hmax = max([0.0] + [b[2] for b in self.bumps if b[2] > 0])
        hmin = min([0.0] + [b[2] for b in self.bumps if b[2] < 0])
        return np.array([-self.extent, -self.extent, hmin]), np.array([self.extent, self.extent, hmax])


def _icosphere(subdivisions: int):
    t = (1 + 5**0.5) / 2
    V = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    F = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    V = [np.array(v, float) / np.linalg.norm(v) for v in V]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = V[i] + V[j]
                V.append(m / np.linalg.norm(m))
                cache[key] = len(V) - 1
            return cache[key]

        newF = []
        for a, b, c in F:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            newF += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        F = newF
    return np.array(V), np.array(F, dtype=np.int64)


def procedural_color(points, seed: int) -> np.ndarray:
    """Smooth, seeded RGB texture in [0.1, 0.9] defined on 3D positions."""
    rng = np.random.default_rng(seed)
    P = np.asarray(points, dtype=np.float64)
    out = np.full(P.shape[:-1] + (3,), 0.5)
    for _ in range(4):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        freq = rng.uniform(3.0, 9.0)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.05, 0.12, size=3)
        out += amp * np.sin(freq * (P @ direction) + phase)[..., None]
    return np.clip(out, 0.1, 0.9)


# --- scene spec and ground truth --------------------------------------------


@dataclass(frozen=True)
class SyntheticSceneSpec:
    surface: str = "sphere"  # sphere | plane | heightfield
    seed: int = 0
    texture_seed: int = 0
    num_views: int = 6
    width: int = 128
    height: int = 96
    focal: float = 110.0
    ring_radius: float = 3.0
    ring_height: float = 0.0
    ring_jitter: float = 0.0  # radians of random azimuth/elevation jitter
    elevation: float = 0.15  # radians, alternating sign around the ring (sphere)
    arc: float = 2 * np.pi  # azimuth span covered by the ring
    pixel_noise: float = 0.0  # sigma_px, lateral noise in pixels
    point_noise: float = 0.0  # sigma_3d, per-component 3D noise
    corrupt_fraction: float = 0.0
    corrupt_noise: float = 0.05  # relative depth noise on corrupted cells
    scale_jitter: float = 0.0  # per-view point-map scale drift (log-normal sigma)
    region_corruption: float = 0.0  # normal displacement (scene units) of a bump shared by all point maps
    region_view: int = 0  # the bump sits on the surface point seen near this view's image centre
    region_radius_px: float = 10.0  # bump radius, measured in region_view's pixels
    sphere_radius: float = 1.0
    num_bumps: int = 6

    def __post_init__(self):
        if self.num_views < 2:
            raise ConfigError("synthetic scenes need at least 2 views")
        if self.ring_radius <= 0:
            raise ConfigError("degenerate camera ring: radius must be positive")
        for name in ("pixel_noise", "point_noise", "corrupt_fraction", "corrupt_noise", "scale_jitter"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.surface not in ("sphere", "plane", "heightfield"):
            raise ConfigError(f"unknown surface kind {self.surface!r}")


PRESETS = {
    "sphere": SyntheticSceneSpec(surface="sphere"),
    "plane": SyntheticSceneSpec(surface="plane", ring_radius=1.5, ring_height=2.5),
    "heightfield": SyntheticSceneSpec(surface="heightfield", ring_radius=1.5, ring_height=2.5),
}


@dataclass
class GroundTruth:
    intrinsics: list[CameraIntrinsics]
    poses: list[CameraPose]
    depths: list[DepthMap]
    surface: object
    mesh_vertices: np.ndarray
    mesh_faces: np.ndarray
    view_scales: list[float] = field(default_factory=list)
    region_center: np.ndarray | None = None  # corrupted patch, when the spec asks for one
    region_radius: float = 0.0

    @property
    def cameras(self):
        return list(zip(self.intrinsics, self.poses))


def make_surface(spec: SyntheticSceneSpec):
    if spec.surface == "sphere":
        return Sphere(spec.sphere_radius)
    if spec.surface == "plane":
        return Heightfield(())
    rng = np.random.default_rng([spec.seed, 17])
    bumps = [
        (rng.uniform(-1.2, 1.2), rng.uniform(-1.2, 1.2), rng.uniform(0.08, 0.2) * rng.choice([-1, 1]), rng.uniform(0.25, 0.5))
        for _ in range(spec.num_bumps)
    ]
    return Heightfield(bumps)


def camera_ring(spec: SyntheticSceneSpec) -> list[CameraPose]:
    rng = np.random.default_rng([spec.seed, 5])
    poses = []
    n = spec.num_views
    full_circle = abs(spec.arc - 2 * np.pi) < 1e-12
    for i in range(n):
        frac = i / n if full_circle else (i / (n - 1) - 0.5)
        az = spec.arc * frac + rng.uniform(-1, 1) * spec.ring_jitter
        if spec.surface == "sphere":
            el = spec.elevation * (1 if i % 2 == 0 else -1) + rng.uniform(-1, 1) * spec.ring_jitter
            eye = spec.ring_radius * np.array([np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)])
            eye[2] += spec.ring_height
            poses.append(CameraPose.look_at(eye, np.zeros(3)))
        else:
            eye = np.array([spec.ring_radius * np.cos(az), spec.ring_radius * np.sin(az), spec.ring_height])
            eye[2] += rng.uniform(-1, 1) * spec.ring_jitter
            poses.append(CameraPose.look_at(eye, np.zeros(3)))
    return poses


def raycast_view(surface, K: CameraIntrinsics, pose: CameraPose):
    """Ground-truth z-depth, world points, normals and hit mask for one view."""
    rays_cam = K.rays()
    dirs = rays_cam @ pose.rotation  # camera -> world direction, z-component 1 in camera frame
    origin = pose.center
    t, n = surface.raycast(origin, dirs)
    hit = np.isfinite(t)
    depth = np.where(hit, t, 0.0)  # ray z-component is 1, so t is z-depth
    P = origin + depth[..., None] * dirs
    return depth, P, n, hit


def generate_synthetic(spec: SyntheticSceneSpec) -> tuple[SceneBundle, GroundTruth]:
    surface = make_surface(spec)
    K = CameraIntrinsics.centered(spec.focal, spec.width, spec.height)
    poses = camera_ring(spec)
    rng = np.random.default_rng([spec.seed, 11])
    n = spec.num_views
    scales = [1.0] + [float(np.exp(rng.normal(0, spec.scale_jitter))) if spec.scale_jitter else 1.0 for _ in range(n - 1)]

    raw = []
    for i, pose in enumerate(poses):
        depth, P, normals, hit = raycast_view(surface, K, pose)
        if not hit.any():
            raise ConfigError(f"view {i} sees no surface; adjust the camera ring")
        raw.append((depth, P, normals, hit))

    pairs = complete_pairs(n) if n <= 8 else [(i, (i + 1) % n) for i in range(n)]

    region_center, region_radius = None, 0.0
    if spec.region_corruption:
        depth, P, _, hit = raw[spec.region_view]
        rr = np.random.default_rng([spec.seed, 7])
        cu = rr.uniform(0.35, 0.65) * K.width
        cv = rr.uniform(0.35, 0.65) * K.height
        u, v = K.pixel_grid()
        dist = np.where(hit, (u - cu) ** 2 + (v - cv) ** 2, np.inf)
        k = np.unravel_index(np.argmin(dist), dist.shape)
        region_center = P[k]
        region_radius = spec.region_radius_px * depth[k] / K.fx

    def noisy_points(i: int, stream: int):
        """World points of view ``i`` under the noise model, plus confidence."""
        depth, P, normals, hit = raw[i]
        r = np.random.default_rng([spec.seed, 101, i, stream])
        u, v = K.pixel_grid()
        d = depth.copy()
        if spec.pixel_noise:
            u = u + r.normal(0, spec.pixel_noise, u.shape)
            v = v + r.normal(0, spec.pixel_noise, v.shape)
        Xc = np.stack([(u - K.cx) / K.fx * d, (v - K.cy) / K.fy * d, d], axis=-1)
        if region_center is not None:
            # the same world-space bump in every view: a consistent but wrong geometry
            q = np.linalg.norm(np.where(hit[..., None], P, 0.0) - region_center, axis=-1) / region_radius
            bump = np.where(hit & (q < 1), (1 - np.minimum(q, 1) ** 2) ** 2, 0.0)
            Xc = Xc + spec.region_corruption * bump[..., None] * (normals @ poses[i].rotation.T)
        if spec.point_noise:
            Xc = Xc + r.normal(0, spec.point_noise, Xc.shape)
        ray = K.rays()
        ray /= np.linalg.norm(ray, axis=-1, keepdims=True)
        n_cam = normals @ poses[i].rotation.T
        cos = np.abs(np.einsum("...i,...i->...", n_cam, ray))
        conf = 1.0 + 4.0 * cos
        if spec.corrupt_fraction:
            bad = r.random(d.shape) < spec.corrupt_fraction
            conf = np.where(bad, r.uniform(0.0, 1.0, d.shape), conf)
            Xc = np.where(bad[..., None], Xc * (1 + r.normal(0, spec.corrupt_noise, d.shape))[..., None], Xc)
        Xc[~hit] = np.nan
        conf[~hit] = 0.0
        return poses[i].inverse_transform(Xc), conf

    views = []
    for i in range(n):
        depth, P, normals, hit = raw[i]
        image = np.where(hit[..., None], procedural_color(P, spec.texture_seed), SKY_COLOR)
        Xw, conf = noisy_points(i, 0)
        own = PointMapFrame(scales[i] * poses[i].transform(Xw), conf, i, i)
        sky = ~hit if (~hit).any() else None
        views.append(ViewData(image, own, sky, None, {}))
    for stream, (i, j) in enumerate(pairs, start=1):
        # view j's points expressed in view i's (scaled) camera frame
        Xw, conf = noisy_points(j, stream)
        views[j].cross[i] = PointMapFrame(scales[i] * poses[i].transform(Xw), conf, j, i)

    V, F = surface.mesh()
    depths = [DepthMap(r[0], r[3]) for r in raw]
    gt = GroundTruth([K] * n, poses, depths, surface, V, F, scales, region_center, region_radius)
    return SceneBundle(views, pairs, None), gt


# --- refined depth candidates -------------------------------------------------


def masked_gaussian(Z: np.ndarray, mask: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian smoothing that ignores masked-out cells (normalised convolution)."""
    w = ndimage.gaussian_filter(mask.astype(np.float64), sigma, mode="nearest")
    s = ndimage.gaussian_filter(np.where(mask, Z, 0.0), sigma, mode="nearest")
    return np.where(w > 1e-12, s / np.maximum(w, 1e-12), 0.0)


def highpass(Z: np.ndarray, mask: np.ndarray, sigma: float) -> np.ndarray:
    return np.where(mask, Z - masked_gaussian(Z, mask, sigma), 0.0)


@dataclass(frozen=True)
class RefinedDepthProvider:
    """Source of detail-rich but scale-unreliable depth candidates.

    ``source`` set to a directory reads candidates from ``*.raw`` files (per
    view in ``view_###/`` when that subdirectory exists). Otherwise an oracle
    returns ``a * (D + detail) + b`` per sample, where detail is the
    high-pass of ``references[view]`` minus the high-pass of ``D`` when a
    reference is given, or seeded high-frequency noise otherwise.
    """

    source: str | Path | None = None
    samples_per_view: int = 3
    drift_a: float = 1.0
    drift_b: float = 0.0
    drift_jitter: float = 0.0  # relative spread of a (and of b in mean-depth units) across samples
    detail_gain: float = 0.0
    detail_sigma: float = 1.5  # pixels, high-pass cutoff
    noise: float = 0.0  # relative per-sample noise
    seed: int = 0
    references: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if self.samples_per_view < 1:
            raise ConfigError("samples_per_view must be at least 1")

    def with_references(self, references: dict) -> "RefinedDepthProvider":
        return replace(self, references=dict(references))

    def sample(self, view: int, depth: DepthMap, round_index: int = 0) -> list[DepthMap]:
        if self.source is not None:
            return self._from_directory(view, depth.shape)
        return [self._oracle(view, depth, s, round_index) for s in range(self.samples_per_view)]

    def sample_one(self, view: int, depth: DepthMap, sample: int, round_index: int = 0) -> DepthMap:
        """Candidate ``sample`` of ``view`` given the current input ``depth``."""
        if self.source is not None:
            return self._from_directory(view, depth.shape)[sample]
        return self._oracle(view, depth, sample, round_index)

    @property
    def chained(self) -> bool:
        """Whether candidates depend on the input map (oracle) or are fixed files."""
        return self.source is None

    def _from_directory(self, view: int, shape) -> list[DepthMap]:
        root = Path(self.source)
        sub = root / f"view_{view:03d}"
        files = sorted((sub if sub.is_dir() else root).glob("*.raw"))[: self.samples_per_view]
        if not files:
            raise EmptyResultError(f"no candidate depth files in {sub if sub.is_dir() else root}")
        out = []
        for f in files:
            d = DepthMap.from_array(read_raw(f))
            if d.shape != tuple(shape):
                raise ConfigError(f"{f}: candidate size {d.shape} differs from view size {tuple(shape)}")
            out.append(d)
        return out

    def _oracle(self, view: int, depth: DepthMap, sample: int, round_index: int) -> DepthMap:
        rng = np.random.default_rng([self.seed, view, sample, round_index])
        D, M = depth.depth, depth.valid_mask
        mean = depth.mean() if M.any() else 1.0
        Y = D.copy()
        if self.detail_gain:
            ref = self.references.get(view)
            if ref is not None:
                ref = ref if isinstance(ref, DepthMap) else DepthMap.from_array(ref)
                both = M & ref.valid_mask
                detail = highpass(ref.depth, both, self.detail_sigma) - highpass(D, both, self.detail_sigma)
                Y = np.where(both, Y + self.detail_gain * detail, Y)
            else:
                field_ = highpass(rng.normal(size=D.shape), np.ones(D.shape, bool), self.detail_sigma)
                Y = Y + self.detail_gain * 0.01 * mean * field_
        if self.noise:
            Y = Y + self.noise * mean * rng.normal(size=D.shape)
        a, b = self.drift_a, self.drift_b
        if self.drift_jitter:
            a = a * (1 + self.drift_jitter * rng.uniform(-1, 1))
            b = b + self.drift_jitter * mean * rng.uniform(-1, 1)
        Y = a * Y + b
        return DepthMap(np.where(M, Y, 0.0), M & (Y > 0))


def sample_refined_depths(provider: RefinedDepthProvider, view: int, depth: DepthMap, round_index: int = 0):
    return provider.sample(view, depth, round_index)
