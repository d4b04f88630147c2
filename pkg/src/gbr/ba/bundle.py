"""Levenberg-Marquardt bundle adjustment over camera poses, focal lengths and track points.

Parameterisation, chosen so that every increment lives in a camera frame and
the iteration commutes with a global rigid motion of the inputs:

* rotation: ``R <- exp([w]) R`` with ``w`` in the camera frame;
* centre:   ``c <- c + R^T d`` with ``d`` in the camera frame;
* view 0 is frozen, and view 1's centre moves on the sphere of fixed radius
  around view 0's centre (two tangent parameters), which pins the gauge;
* focal:    ``f <- f exp(s)``, shared by all views or per view;
* points:   plain world-frame increments.

The reduced camera system is formed with a Schur complement over the 3x3
point blocks. Damping is Marquardt-style on the camera block (its diagonal
is frame-invariant by construction) and isotropic on each point block.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ..errors import NumericalError
from ..geometry import CameraIntrinsics, CameraPose, SimilarityTransform, orthonormalize, rotvec_to_matrix, skew
from .matching import MatchSet

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CameraRig:
    intrinsics: tuple[CameraIntrinsics, ...]
    poses: tuple[CameraPose, ...]

    def __post_init__(self):
        object.__setattr__(self, "intrinsics", tuple(self.intrinsics))
        object.__setattr__(self, "poses", tuple(self.poses))
        if len(self.intrinsics) != len(self.poses):
            raise ValueError("one intrinsics entry per pose required")

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def centers(self) -> np.ndarray:
        return np.array([p.center for p in self.poses])

    def cameras(self) -> list[tuple[CameraIntrinsics, CameraPose]]:
        return list(zip(self.intrinsics, self.poses))

    def transformed(self, T: SimilarityTransform) -> "CameraRig":
        """The same cameras after moving the world by ``T``."""
        return CameraRig(self.intrinsics, [T.apply_to_pose(p) for p in self.poses])

    def anchored(self) -> tuple["CameraRig", SimilarityTransform]:
        """Rig moved rigidly so view 0 has the identity pose, plus the motion used."""
        T = self.poses[0].as_similarity()
        return self.transformed(T), T


@dataclass
class BAReport:
    initial_rmse: float
    final_rmse: float
    initial_cost: float
    final_cost: float
    iterations: int  # accepted steps
    evaluations: int
    stalled: bool
    reason: str
    rotation_delta_deg: list[float] = field(default_factory=list)
    center_delta: list[float] = field(default_factory=list)
    focal_delta: list[float] = field(default_factory=list)
    retained_matches: int = 0
    total_matches: int = 0
    observations: int = 0
    tracks: int = 0
    cost_history: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


def huber_cost(r: np.ndarray, delta: float | None) -> np.ndarray:
    """Per-observation robust cost of residual norms ``r``."""
    if delta is None:
        return 0.5 * r**2
    return np.where(r <= delta, 0.5 * r**2, delta * (r - 0.5 * delta))


def _tangent_basis(d: np.ndarray) -> np.ndarray:
    """Two unit vectors orthogonal to unit ``d`` (3x2)."""
    a = np.eye(3)[np.argmin(np.abs(d))]
    e1 = np.cross(d, a)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(d, e1)
    return np.stack([e1, e2], axis=1)


class _Problem:
    def __init__(self, matches: MatchSet, rig: CameraRig, mode: str, focal_mode: str, huber_delta):
        self.m = matches
        self.n = len(rig)
        self.mode = mode
        self.focal_mode = focal_mode
        self.delta = huber_delta
        self.K0 = rig.intrinsics
        # camera parameter layout
        self.cam_cols: list[np.ndarray] = []
        col = 0
        if mode == "full":
            for v in range(self.n):
                k = 0 if v == 0 else (5 if v == 1 else 6)
                self.cam_cols.append(np.arange(col, col + k))
                col += k
        else:
            self.cam_cols = [np.zeros(0, dtype=int) for _ in range(self.n)]
        self.focal_cols = np.full(self.n, -1)
        if focal_mode == "shared":
            self.focal_cols[:] = col
            col += 1
        elif focal_mode == "per_view":
            self.focal_cols = np.arange(col, col + self.n)
            col += self.n
        elif focal_mode != "none":
            raise ValueError(f"focal_mode must be none, shared or per_view, got {focal_mode!r}")
        self.nc = col
        if mode == "full" and self.n >= 2:
            # baseline radius and the fixed tangent basis in view 1's frame
            self.radius = float(np.linalg.norm(rig.poses[1].center - rig.poses[0].center))
            if self.radius <= 0:
                raise NumericalError("views 0 and 1 share a centre; the baseline gauge is undefined")

    def residuals(self, poses, focals, points):
        m = self.m
        R = np.stack([p.rotation for p in poses])[m.view]
        t = np.stack([p.translation for p in poses])[m.view]
        X = np.einsum("mij,mj->mi", R, points[m.track]) + t
        f = focals[m.view]
        cx = np.array([K.cx for K in self.K0])[m.view]
        cy = np.array([K.cy for K in self.K0])[m.view]
        aspect = np.array([K.fy / K.fx for K in self.K0])[m.view]
        z = X[:, 2]
        uv = np.stack([f * X[:, 0] / z + cx, f * aspect * X[:, 1] / z + cy], axis=1)
        return uv - m.pixel, X, z

    def cost(self, poses, focals, points):
        r, _, z = self.residuals(poses, focals, points)
        if np.any(z <= 1e-9) or not np.all(np.isfinite(r)):
            return np.inf, r
        return float(huber_cost(np.linalg.norm(r, axis=1), self.delta).sum()), r

    def linearize(self, poses, focals, points):
        m = self.m
        M = m.num_observations
        T = m.num_tracks
        r, X, z = self.residuals(poses, focals, points)
        norm = np.linalg.norm(r, axis=1)
        if self.delta is None:
            w = np.ones(M)
        else:
            w = np.where(norm <= self.delta, 1.0, self.delta / np.maximum(norm, 1e-300))
        sw = np.sqrt(w)
        f = focals[m.view]
        aspect = np.array([K.fy / K.fx for K in self.K0])[m.view]
        fx, fy = f, f * aspect
        Jproj = np.zeros((M, 2, 3))
        Jproj[:, 0, 0] = fx / z
        Jproj[:, 0, 2] = -fx * X[:, 0] / z**2
        Jproj[:, 1, 1] = fy / z
        Jproj[:, 1, 2] = -fy * X[:, 1] / z**2
        R = np.stack([p.rotation for p in poses])[m.view]
        Jpt = Jproj @ R

        rows, cols, vals = [], [], []
        row_ids = np.arange(2 * M).reshape(M, 2)

        def add(block, col_idx, mask):
            # block (M', 2, k) -> entries at columns col_idx (M', k)
            k = block.shape[2]
            rr = np.repeat(row_ids[mask][:, :, None], k, axis=2)
            cc = np.repeat(col_idx[:, None, :], 2, axis=1)
            rows.append(rr.ravel())
            cols.append(cc.ravel())
            vals.append((block * sw[mask][:, None, None]).ravel())

        if self.mode == "full":
            for v in range(1, self.n):
                mask = m.view == v
                if not mask.any():
                    continue
                Jp = Jproj[mask]
                Jrot = -Jp @ skew(X[mask])
                if v == 1:
                    B = self._view1_basis(poses)
                    Jc = -self.radius * (Jp @ B)
                else:
                    Jc = -Jp
                block = np.concatenate([Jrot, Jc], axis=2)
                add(block, np.broadcast_to(self.cam_cols[v], (mask.sum(), block.shape[2])), mask)
        if self.focal_mode != "none":
            u_off = r[:, 0] + m.pixel[:, 0] - np.array([K.cx for K in self.K0])[m.view]
            v_off = r[:, 1] + m.pixel[:, 1] - np.array([K.cy for K in self.K0])[m.view]
            block = np.stack([u_off, v_off], axis=1)[:, :, None]
            add(block, self.focal_cols[m.view][:, None], np.ones(M, bool))
        pt_cols = self.nc + 3 * m.track[:, None] + np.arange(3)[None, :]
        add(Jpt, pt_cols, np.ones(M, bool))

        J = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(2 * M, self.nc + 3 * T),
        )
        rw = (r * sw[:, None]).ravel()
        return J, rw

    def _view1_basis(self, poses):
        c0, c1 = poses[0].center, poses[1].center
        d_cam = poses[1].rotation @ ((c1 - c0) / np.linalg.norm(c1 - c0))
        return _tangent_basis(d_cam)

    def apply(self, poses, focals, points, dx):
        new_poses = list(poses)
        if self.mode == "full":
            for v in range(1, self.n):
                d = dx[self.cam_cols[v]]
                R = poses[v].rotation
                R_new = orthonormalize(rotvec_to_matrix(d[:3]) @ R)
                c = poses[v].center
                if v == 1:
                    B = self._view1_basis(poses)
                    c0 = poses[0].center
                    u = (c - c0) / np.linalg.norm(c - c0) + R.T @ (B @ d[3:5])
                    c_new = c0 + self.radius * u / np.linalg.norm(u)
                else:
                    c_new = c + R.T @ d[3:6]
                new_poses[v] = CameraPose.from_center(R_new, c_new)
        new_f = focals.copy()
        if self.focal_mode != "none":
            new_f = focals * np.exp(dx[self.focal_cols])
        new_pts = points + dx[self.nc :].reshape(-1, 3)
        return new_poses, new_f, new_pts


def _solve_damped(H: sp.csr_matrix, g: np.ndarray, nc: int, T: int, lam: float):
    """Damped normal equations via the Schur complement on the point blocks."""
    Hcc = H[:nc, :nc].toarray()
    Hcp = H[:nc, nc:]
    Hpp = H[nc:, nc:]
    # points never couple with each other, so Hpp is block diagonal
    coo = Hpp.tocoo()
    blocks = np.zeros((T, 3, 3))
    np.add.at(blocks, (coo.row // 3, coo.row % 3, coo.col % 3), coo.data)
    blocks = blocks + (lam * np.trace(blocks, axis1=1, axis2=2) / 3.0)[:, None, None] * np.eye(3)
    try:
        inv = np.linalg.inv(blocks)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(inv)):
        return None
    gc, gp = g[:nc], g[nc:]
    inv_gp = np.einsum("tij,tj->ti", inv, gp.reshape(T, 3)).ravel()
    if nc:
        Hinv = sp.block_diag(list(inv), format="csr") if T else sp.csr_matrix((0, 0))
        Hcc_d = Hcc + lam * np.diag(np.diag(Hcc))
        S = Hcc_d - (Hcp @ Hinv @ Hcp.T).toarray()
        rhs = -(gc - Hcp @ inv_gp)
        try:
            dc = np.linalg.solve(S, rhs)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(dc)):
            return None
        dp = -(inv_gp + np.einsum("tij,tj->ti", inv, (Hcp.T @ dc).reshape(T, 3)).ravel())
        return np.concatenate([dc, dp])
    return -inv_gp


def bundle_adjust(
    matches: MatchSet,
    rig: CameraRig,
    points: np.ndarray | None = None,
    mode: str = "full",
    huber_delta: float | None = 2.0,
    focal_mode: str = "none",
    max_iterations: int = 100,
    rel_tol: float = 1e-10,
    initial_lambda: float = 1e-3,
    max_rejections: int = 10,
) -> tuple[CameraRig, np.ndarray, BAReport]:
    """Minimise the robust reprojection error of ``matches`` over ``rig`` and the track points.

    ``mode="points_only"`` keeps every camera fixed. Returns the refined rig,
    the refined points (one per track) and a :class:`BAReport`.
    """
    if mode not in ("full", "points_only"):
        raise ValueError(f"mode must be full or points_only, got {mode!r}")
    n = len(rig)
    points = np.array(matches.points if points is None else points, dtype=np.float64)
    if points.shape != (matches.num_tracks, 3):
        raise ValueError("one point per track required")
    observed = np.unique(matches.view)
    if mode == "full":
        if matches.num_tracks < 6 or len(observed) < 2:
            raise NumericalError(
                f"bundle adjustment is underdetermined: {matches.num_tracks} tracks over {len(observed)} views "
                "(need >=6 tracks spanning >=2 views)"
            )
        missing = sorted(set(range(1, n)) - set(observed.tolist()))
        if missing:
            raise NumericalError(f"bundle adjustment is underdetermined: views {missing} have no observations")
    elif matches.num_tracks == 0:
        return rig, points, BAReport(0.0, 0.0, 0.0, 0.0, 0, 0, False, "no tracks")
    if np.any(matches.view >= n):
        raise ValueError("match set references a view outside the rig")

    prob = _Problem(matches, rig, mode, focal_mode, huber_delta)
    poses = list(rig.poses)
    focals = np.array([K.fx for K in rig.intrinsics])
    cost, r = prob.cost(poses, focals, points)
    if not np.isfinite(cost):
        raise NumericalError("initial configuration has points behind a camera")
    rmse0 = float(np.sqrt(np.mean(np.sum(r**2, axis=1))))
    cost0 = cost
    floor = 1e-26 * max(matches.num_observations, 1)
    lam = initial_lambda
    accepted = evaluations = rejections = 0
    stalled = False
    reason = "max_iterations"
    history = [cost]
    T = matches.num_tracks

    if cost <= floor:
        reason = "already_optimal"
    else:
        while accepted < max_iterations:
            J, rw = prob.linearize(poses, focals, points)
            H = (J.T @ J).tocsr()
            g = J.T @ rw
            dx = _solve_damped(H, g, prob.nc, T, lam)
            evaluations += 1
            if dx is not None:
                cand = prob.apply(poses, focals, points, dx)
                new_cost, _ = prob.cost(*cand)
            else:
                new_cost = np.inf
            if new_cost < cost:
                poses, focals, points = cand
                rel = (cost - new_cost) / cost
                cost = new_cost
                history.append(cost)
                accepted += 1
                rejections = 0
                lam = max(lam / 10.0, 1e-12)
                if cost <= floor:
                    reason = "cost_floor"
                    break
                if rel < rel_tol:
                    reason = "relative_tolerance"
                    break
            else:
                rejections += 1
                lam *= 10.0
                if rejections >= max_rejections:
                    # distinguish a converged optimum from a genuine stall
                    step_small = dx is not None and np.abs(dx).max() <= 1e-12 * max(1.0, np.abs(points).max())
                    stalled = not step_small
                    reason = "stalled" if stalled else "step_tolerance"
                    break

    _, r = prob.cost(poses, focals, points)
    rmse = float(np.sqrt(np.mean(np.sum(r**2, axis=1))))
    intr = [K.with_focal(float(f), float(f * K.fy / K.fx)) for K, f in zip(rig.intrinsics, focals)]
    out = CameraRig(intr, poses)
    rot_delta = [
        float(np.degrees(np.arccos(np.clip((np.trace(a.rotation.T @ b.rotation) - 1) / 2, -1, 1))))
        for a, b in zip(rig.poses, poses)
    ]
    report = BAReport(
        initial_rmse=rmse0,
        final_rmse=rmse,
        initial_cost=float(cost0),
        final_cost=float(cost),
        iterations=accepted,
        evaluations=evaluations,
        stalled=stalled,
        reason=reason,
        rotation_delta_deg=rot_delta,
        center_delta=[float(np.linalg.norm(a.center - b.center)) for a, b in zip(rig.poses, poses)],
        focal_delta=[float(b.fx - a.fx) for a, b in zip(rig.intrinsics, intr)],
        retained_matches=int(matches.stats.get("retained_matches", matches.num_observations)),
        total_matches=int(matches.stats.get("pair_matches", matches.num_observations)),
        observations=matches.num_observations,
        tracks=matches.num_tracks,
        cost_history=[float(c) for c in history],
    )
    if stalled:
        logger.warning("bundle adjustment stalled after %d rejected steps; returning best iterate", max_rejections)
    return out, points, report


def reprojection_rmse(matches: MatchSet, rig: CameraRig, points: np.ndarray) -> float:
    prob = _Problem(matches, rig, "points_only", "none", None)
    r, _, _ = prob.residuals(list(rig.poses), np.array([K.fx for K in rig.intrinsics]), np.asarray(points, float))
    return float(np.sqrt(np.mean(np.sum(r**2, axis=1))))


def merge_second_round(first: np.ndarray, second: np.ndarray | None) -> np.ndarray:
    """Union of the first-round cloud and the points refined in the second round."""
    first = np.asarray(first, dtype=np.float64).reshape(-1, 3)
    if second is None or len(second) == 0:
        return first.copy()
    return np.concatenate([first, np.asarray(second, dtype=np.float64).reshape(-1, 3)])
