"""Registration of per-view point maps into one frame, and focal estimation from a point map."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from ..errors import NumericalError
from ..geometry import (
    CameraPose,
    PointMapFrame,
    SimilarityTransform,
    orthonormalize,
    rotvec_to_matrix,
    skew,
    umeyama,
)

logger = logging.getLogger(__name__)


@dataclass
class AlignmentResult:
    transforms: list[SimilarityTransform]  # view frame -> unified frame
    pair_transforms: dict[tuple[int, int], SimilarityTransform]  # (k, l): frame l -> frame k
    dropped_pairs: list[tuple[int, int]] = field(default_factory=list)
    initial_cost: float = float("nan")
    final_cost: float = float("nan")
    iterations: int = 0

    def poses(self) -> list[CameraPose]:
        """World-to-camera poses implied by the view-to-world similarities."""
        return [CameraPose.from_center(T.rotation.T, T.translation) for T in self.transforms]

    def unified(self, frames: list[PointMapFrame]) -> list[PointMapFrame]:
        return [f.transformed(T, -1) for f, T in zip(frames, self.transforms)]


def _pair_data(own, cross, k, l):
    """Pixel-aligned ``(points in frame k, same cells in frame l, weights)``."""
    X = cross[(k, l)]
    src = own[l]
    P = src.points.reshape(-1, 3)
    Q = X.points.reshape(-1, 3)
    w = (src.confidence * X.confidence).reshape(-1)
    ok = np.all(np.isfinite(P), axis=1) & np.all(np.isfinite(Q), axis=1) & (w > 0)
    return Q[ok], P[ok], w[ok]


def scene_pair_maps(bundle) -> tuple[list[PointMapFrame], dict[tuple[int, int], PointMapFrame]]:
    """Own-frame maps and cross maps keyed ``(k, l)`` from a scene bundle."""
    own = [v.pointmap for v in bundle.views]
    cross = {(k, l): frame for l, v in enumerate(bundle.views) for k, frame in v.cross.items()}
    return own, cross


def pairwise_align(
    own: list[PointMapFrame],
    cross: dict[tuple[int, int], PointMapFrame],
    pairs: list[tuple[int, int]],
    reference: int = 0,
    iterations: int = 30,
    max_samples: int = 4000,
    robust_eps: float = 1e-9,
) -> AlignmentResult:
    """Bring every view's point map into the reference view's frame.

    ``own[v]`` holds view ``v``'s points in its own frame and ``cross[(k, l)]``
    holds view ``l``'s points (pixel-aligned with ``own[l]``) expressed in view
    ``k``'s frame. Each pair is initialised with a confidence-weighted Umeyama
    fit, chained along a spanning tree from ``reference``, then all
    similarities are refined jointly on ``sum C_k C_l ||S_k(X) - S_l(P)||``
    with iteratively reweighted Gauss-Newton steps.
    """
    n = len(own)
    pair_T: dict[tuple[int, int], SimilarityTransform] = {}
    data: dict[tuple[int, int], tuple] = {}
    dropped = []
    for i, j in pairs:
        for k, l in ((i, j), (j, i)):
            if (k, l) not in cross:
                continue
            Q, P, w = _pair_data(own, cross, k, l)
            if len(w) < 3:
                logger.warning("pair (%d, %d): fewer than 3 confident correspondences, dropped", k, l)
                dropped.append((k, l))
                continue
            try:
                pair_T[(k, l)] = umeyama(P, Q, w, with_scale=True)
            except ValueError:
                logger.warning("pair (%d, %d): degenerate correspondences, dropped", k, l)
                dropped.append((k, l))
                continue
            data[(k, l)] = (Q, P, w)

    edges = list(pair_T)
    if n > 1:
        rows = [e[0] for e in edges] + [e[1] for e in edges]
        cols = [e[1] for e in edges] + [e[0] for e in edges]
        graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        ncomp, labels = connected_components(graph, directed=False)
        if ncomp > 1:
            comps = [sorted(np.flatnonzero(labels == c).tolist()) for c in range(ncomp)]
            raise NumericalError(f"pair graph is disconnected; components: {comps}")

    # spanning-tree initialisation
    S: list[SimilarityTransform | None] = [None] * n
    S[reference] = SimilarityTransform.identity()
    queue = deque([reference])
    while queue:
        k = queue.popleft()
        for (a, b), T in sorted(pair_T.items()):
            if a == k and S[b] is None:
                S[b] = S[k].compose(T)
                queue.append(b)
            elif b == k and S[a] is None:
                S[a] = S[k].compose(T.inverse())
                queue.append(a)

    # deterministic subsampling for the joint refinement
    sub = {}
    for e, (Q, P, w) in data.items():
        if len(w) > max_samples:
            idx = np.linspace(0, len(w) - 1, max_samples).round().astype(int)
            sub[e] = (Q[idx], P[idx], w[idx])
        else:
            sub[e] = (Q, P, w)

    free = [v for v in range(n) if v != reference]
    col = {v: 7 * i for i, v in enumerate(free)}
    nparam = 7 * len(free)

    def cost_of(Ss):
        total = 0.0
        for (k, l), (Q, P, w) in sub.items():
            r = Ss[k].apply(Q) - Ss[l].apply(P)
            total += float(w @ np.sqrt(np.einsum("ij,ij->i", r, r) + robust_eps**2))
        return total

    cost0 = cost_of(S)
    cost = cost0
    it = 0
    for it in range(1, iterations + 1):
        if nparam == 0:
            break
        H = np.zeros((nparam, nparam))
        g = np.zeros(nparam)
        for (k, l), (Q, P, w) in sub.items():
            yk = S[k].apply(Q)
            yl = S[l].apply(P)
            r = yk - yl
            wr = w / np.sqrt(np.einsum("ij,ij->i", r, r) + robust_eps**2)
            blocks = []
            for v, y, sign in ((k, yk, 1.0), (l, yl, -1.0)):
                if v == reference:
                    continue
                J = np.empty((len(y), 3, 7))
                J[:, :, 0] = y
                J[:, :, 1:4] = -skew(y)
                J[:, :, 4:7] = np.eye(3)
                blocks.append((col[v], sign * J))
            for ca, Ja in blocks:
                g[ca : ca + 7] += np.einsum("n,nij,ni->j", wr, Ja, r)
                for cb, Jb in blocks:
                    H[ca : ca + 7, cb : cb + 7] += np.einsum("n,nij,nik->jk", wr, Ja, Jb)
        H += 1e-12 * np.trace(H) / max(nparam, 1) * np.eye(nparam)
        try:
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("point-map alignment normal equations are singular") from exc
        candidate = list(S)
        for v in free:
            d = step[col[v] : col[v] + 7]
            L = SimilarityTransform(float(np.exp(d[0])), rotvec_to_matrix(d[1:4]), d[4:7])
            candidate[v] = L.compose(S[v])
        new_cost = cost_of(candidate)
        if new_cost > cost:
            break
        S = candidate
        improvement = cost - new_cost
        cost = new_cost
        if improvement <= 1e-12 * max(cost0, 1e-300) or np.abs(step).max() < 1e-13:
            break

    S = [SimilarityTransform(T.scale, orthonormalize(T.rotation), T.translation) for T in S]
    return AlignmentResult(S, pair_T, dropped, cost0, cost, it)


@dataclass
class FocalEstimate:
    focal: float
    spread: float  # relative interquartile range of per-cell focal estimates
    ambiguous: bool
    iterations: int


def _weighted_quantile(values, weights, q):
    order = np.argsort(values)
    v, w = values[order], weights[order]
    cw = np.cumsum(w)
    return np.interp(np.asarray(q) * cw[-1], cw, v)


def estimate_focal(
    frame: PointMapFrame,
    min_confidence: float = 0.0,
    iterations: int = 100,
    ambiguity_threshold: float = 0.02,
    principal_point: tuple[float, float] | None = None,
) -> FocalEstimate:
    """Focal length minimising ``sum C ||(u - W/2, v - H/2) - f (X/Z, Y/Z)||``.

    ``frame`` must be expressed in its own camera frame. The unsquared norm is
    minimised by iteratively reweighted least squares, so outlier cells have
    bounded influence. Mixed populations that pull towards different focals
    are flagged ``ambiguous``.
    """
    H, W = frame.shape
    cx, cy = principal_point if principal_point is not None else (W / 2.0, H / 2.0)
    P = frame.points
    C = frame.confidence
    v, u = np.mgrid[0:H, 0:W]
    ok = (C > min_confidence) & np.all(np.isfinite(P), axis=-1)
    ok &= np.where(np.isfinite(P[..., 2]), P[..., 2], -1.0) > 0
    if ok.sum() < 10:
        raise NumericalError(f"focal estimation needs >=10 confident cells with z > 0, got {int(ok.sum())}")
    o = np.stack([u[ok] - cx, v[ok] - cy], axis=-1)
    q = P[ok][:, :2] / P[ok][:, 2:3]
    c = C[ok]
    qq = np.einsum("ij,ij->i", q, q)
    oq = np.einsum("ij,ij->i", o, q)
    if c @ qq <= 1e-12 * c.sum():
        raise NumericalError("focal estimation is degenerate: all points lie on the optical axis")

    f = (c @ oq) / (c @ qq)
    eta = 1e-12 * max(abs(f), 1.0)
    it = 0
    for it in range(1, iterations + 1):
        r = np.linalg.norm(o - f * q, axis=1)
        w = c / np.maximum(r, eta)
        f_new = (w @ oq) / (w @ qq)
        if abs(f_new - f) <= 1e-13 * abs(f):
            f = f_new
            break
        f = f_new
    if not np.isfinite(f) or f <= 0:
        raise NumericalError(f"focal estimation produced a non-positive focal {f}")

    informative = qq > 1e-12
    per_cell = oq[informative] / qq[informative]
    q25, q75 = _weighted_quantile(per_cell, (c * qq)[informative], [0.25, 0.75])
    spread = float((q75 - q25) / f)
    return FocalEstimate(float(f), spread, spread > ambiguity_threshold, it)
