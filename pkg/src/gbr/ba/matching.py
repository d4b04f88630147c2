"""Dense correspondences from aligned point maps: reciprocal 3D nearest neighbours,
dual confidence filtering, per-view capping and multi-view track assembly."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ..errors import EmptyResultError
from ..geometry import PointMapFrame

logger = logging.getLogger(__name__)


@dataclass
class MatchSet:
    """Tracks with their observations, stored flat and sorted by track.

    Observation ``m`` says track ``track[m]`` is seen in view ``view[m]`` at
    ``pixel[m]`` (u, v), which is raster cell ``cell[m]`` of that view.
    """

    points: np.ndarray  # (T, 3)
    track: np.ndarray  # (M,)
    view: np.ndarray  # (M,)
    pixel: np.ndarray  # (M, 2)
    cell: np.ndarray  # (M,)
    confidence: np.ndarray  # (M,)
    stats: dict = field(default_factory=dict)

    @property
    def num_tracks(self) -> int:
        return len(self.points)

    @property
    def num_observations(self) -> int:
        return len(self.track)

    def views_per_track(self) -> np.ndarray:
        return np.bincount(self.track, minlength=self.num_tracks)

    def cells_by_view(self, n_views: int) -> list[np.ndarray]:
        return [np.unique(self.cell[self.view == v]) for v in range(n_views)]

    def subset(self, keep_tracks: np.ndarray) -> "MatchSet":
        keep_tracks = np.asarray(keep_tracks)
        if keep_tracks.dtype == bool:
            keep_tracks = np.flatnonzero(keep_tracks)
        remap = -np.ones(self.num_tracks, dtype=np.int64)
        remap[keep_tracks] = np.arange(len(keep_tracks))
        m = remap[self.track] >= 0
        return MatchSet(
            self.points[keep_tracks], remap[self.track[m]], self.view[m], self.pixel[m],
            self.cell[m], self.confidence[m], dict(self.stats),
        )

    def with_points(self, points: np.ndarray) -> "MatchSet":
        return MatchSet(np.asarray(points, float), self.track, self.view, self.pixel, self.cell, self.confidence, dict(self.stats))

    @classmethod
    def empty(cls) -> "MatchSet":
        z = np.zeros(0, dtype=np.int64)
        return cls(np.zeros((0, 3)), z, z, np.zeros((0, 2)), z, np.zeros(0))


def reciprocal_nearest_neighbors(A: np.ndarray, B: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs ``(i, j)`` with ``j = NN_B(A[i])`` and ``i = NN_A(B[j])``, sorted by ``i``."""
    if len(A) == 0 or len(B) == 0:
        z = np.zeros(0, dtype=np.int64)
        return z, z
    _, ab = cKDTree(B).query(A)
    _, ba = cKDTree(A).query(B)
    i = np.arange(len(A))
    mutual = ba[ab] == i
    return i[mutual], ab[mutual]


def brute_force_reciprocal(A: np.ndarray, B: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """O(N^2) reference for :func:`reciprocal_nearest_neighbors`."""
    d = np.linalg.norm(A[:, None, :] - B[None, :, :], axis=-1)
    ab = d.argmin(axis=1)
    ba = d.argmin(axis=0)
    i = np.arange(len(A))
    mutual = ba[ab] == i
    return i[mutual], ab[mutual]


def _spacing(points: np.ndarray) -> float:
    if len(points) < 2:
        return np.inf
    d, _ = cKDTree(points).query(points, k=2)
    return float(np.median(d[:, 1]))


class _Tracks:
    """Union-find that refuses merges putting two cells of one view in a track."""

    def __init__(self, node_views: np.ndarray):
        self.parent = list(range(len(node_views)))
        self.views = [1 << int(v) for v in node_views]

    def find(self, a: int) -> int:
        p = self.parent
        while p[a] != a:
            p[a] = p[p[a]]
            a = p[a]
        return a

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return True
        if self.views[ra] & self.views[rb]:
            return False
        if ra > rb:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.views[ra] |= self.views[rb]
        return True


def extract_matches(
    frames: list[PointMapFrame],
    pairs: list[tuple[int, int]],
    secondary: list[np.ndarray] | None = None,
    conf_primary_threshold: float = 3.0,
    conf_secondary_threshold: float = 0.05,
    cap_per_view: int | None = 50000,
    masks: list[np.ndarray] | None = None,
    exclude: list[np.ndarray] | None = None,
    require_nonempty: bool = True,
    distance_gate: float | None = 2.0,
) -> MatchSet:
    """Match cells of aligned point maps across every listed pair.

    A cell takes part only if its primary confidence is at least
    ``conf_primary_threshold`` and its secondary confidence at least
    ``conf_secondary_threshold``; both endpoints of a match must pass.
    ``masks`` restricts each view to a region, ``exclude`` lists flat cell
    indices per view to leave out. Pairwise matches are capped per view by
    descending combined confidence and merged into tracks by transitive
    closure; a merge that would observe one view twice is refused.

    Mutual nearest neighbours also pair up points from parts of the scene
    that the two views do not share. ``distance_gate`` drops matches farther
    apart than that multiple of the sampling spacing (median nearest-neighbour
    distance within a view's candidates, the larger of the two views);
    ``None`` keeps every reciprocal match.
    """
    n = len(frames)
    if secondary is None:
        secondary = [np.ones(f.shape) for f in frames]
    cand = []
    for v, f in enumerate(frames):
        P = f.points.reshape(-1, 3)
        c = f.confidence.reshape(-1)
        s = np.asarray(secondary[v], dtype=np.float64).reshape(-1)
        ok = np.all(np.isfinite(P), axis=1) & (c >= conf_primary_threshold) & (s >= conf_secondary_threshold)
        if masks is not None and masks[v] is not None:
            ok &= np.asarray(masks[v], bool).reshape(-1)
        if exclude is not None and exclude[v] is not None and len(exclude[v]):
            ok[np.asarray(exclude[v], dtype=np.int64)] = False
        idx = np.flatnonzero(ok)
        cand.append((idx, P[idx], c[idx] * s[idx]))
    spacing = [_spacing(pts) for _, pts, _ in cand]

    va_l, ca_l, vb_l, cb_l, w_l = [], [], [], [], []
    for i, j in pairs:
        a, b = (i, j) if i < j else (j, i)
        ia, ib = reciprocal_nearest_neighbors(cand[a][1], cand[b][1])
        if len(ia) and distance_gate is not None:
            d = np.linalg.norm(cand[a][1][ia] - cand[b][1][ib], axis=1)
            near = d <= distance_gate * max(spacing[a], spacing[b])
            ia, ib = ia[near], ib[near]
        if len(ia) == 0:
            continue
        va_l.append(np.full(len(ia), a))
        vb_l.append(np.full(len(ia), b))
        ca_l.append(cand[a][0][ia])
        cb_l.append(cand[b][0][ib])
        w_l.append(cand[a][2][ia] * cand[b][2][ib])
    if not w_l:
        if require_nonempty:
            raise EmptyResultError(
                "no matches survived filtering; lower conf_primary_threshold "
                f"(now {conf_primary_threshold}) or conf_secondary_threshold (now {conf_secondary_threshold})"
            )
        return MatchSet.empty()
    va, vb = np.concatenate(va_l), np.concatenate(vb_l)
    ca, cb = np.concatenate(ca_l), np.concatenate(cb_l)
    w = np.concatenate(w_l)
    total = len(w)

    # strongest first; ties resolved by cell identity so input order never matters
    order = np.lexsort((cb, vb, ca, va, -w))
    va, vb, ca, cb, w = va[order], vb[order], ca[order], cb[order], w[order]

    if cap_per_view is not None:
        per_view = np.bincount(va, minlength=n) + np.bincount(vb, minlength=n)
        if per_view.max() > cap_per_view:
            counts = np.zeros(n, dtype=np.int64)
            keep = np.zeros(len(w), dtype=bool)
            for m in range(len(w)):
                a, b = va[m], vb[m]
                if counts[a] < cap_per_view and counts[b] < cap_per_view:
                    keep[m] = True
                    counts[a] += 1
                    counts[b] += 1
            va, vb, ca, cb, w = va[keep], vb[keep], ca[keep], cb[keep], w[keep]

    # node ids for (view, cell)
    widths = np.array([f.shape[1] for f in frames])
    sizes = np.array([f.shape[0] * f.shape[1] for f in frames])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    keys = np.concatenate([offsets[va] + ca, offsets[vb] + cb])
    uniq, inv = np.unique(keys, return_inverse=True)
    na, nb = inv[: len(w)], inv[len(w) :]
    node_view = np.searchsorted(offsets, uniq, side="right") - 1
    node_cell = uniq - offsets[node_view]

    dsu = _Tracks(node_view)
    refused = 0
    for a, b in zip(na.tolist(), nb.tolist()):
        if not dsu.union(a, b):
            refused += 1
    roots = np.array([dsu.find(k) for k in range(len(uniq))])
    _, track_of_node = np.unique(roots, return_inverse=True)
    sizes_t = np.bincount(track_of_node)
    good = sizes_t[track_of_node] >= 2
    track_of_node = np.where(good, track_of_node, -1)
    kept_tracks = np.unique(track_of_node[good])
    remap = -np.ones(len(sizes_t), dtype=np.int64)
    remap[kept_tracks] = np.arange(len(kept_tracks))
    nodes = np.flatnonzero(good)
    t = remap[track_of_node[nodes]]
    order = np.lexsort((node_view[nodes], t))
    nodes, t = nodes[order], t[order]

    views = node_view[nodes]
    cells = node_cell[nodes]
    P = np.stack([frames[v].points.reshape(-1, 3)[c] for v, c in zip(views, cells)]) if len(nodes) else np.zeros((0, 3))
    conf = np.array([frames[v].confidence.reshape(-1)[c] for v, c in zip(views, cells)])
    ntr = len(kept_tracks)
    wsum = np.bincount(t, weights=conf, minlength=ntr)
    pts = np.stack([np.bincount(t, weights=conf * P[:, k], minlength=ntr) for k in range(3)], axis=1)
    pts /= np.maximum(wsum, 1e-300)[:, None]
    pixel = np.stack([cells % widths[views], cells // widths[views]], axis=1).astype(np.float64)
    stats = {"pair_matches": int(total), "retained_matches": int(len(w)), "refused_merges": int(refused)}
    ms = MatchSet(pts, t, views, pixel, cells, conf, stats)
    if ms.num_tracks == 0 and require_nonempty:
        raise EmptyResultError("matching produced no multi-view tracks; lower the confidence thresholds")
    return ms
