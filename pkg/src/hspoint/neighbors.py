"""Exact k-nearest-neighbor search over point positions or feature rows.

Two routes exist on purpose: `knn_bruteforce` is the full-sort reference
oracle, and `SpatialIndex` (a cKDTree) accelerates the 3D point-metric
case. Both produce identical results, including the tie-break: neighbors
are ordered by (distance, point id) ascending, with the query point
itself excluded. Distances are always recomputed from coordinates with
the same subtract-square-sum-sqrt formula so the two routes agree
bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .pointcloud import PointCloud

# Relative slack applied to the candidate radius so kd-tree distances
# that differ from the recomputed ones in the last ulp cannot drop a
# true neighbor from the candidate set.
_RADIUS_SLACK = 1e-9
# Boundary gap below which candidate membership could be ambiguous and
# the exhaustive ball fallback is used instead.
_GAP_EPS = 1e-12


@dataclass(frozen=True)
class NeighborIndex:
    """For each of N query rows, its M nearest neighbor ids and distances.

    Rows are sorted ascending by (distance, id); the query row itself is
    never listed. M may be zero (empty rows), which downstream pooling
    uses for the no-neighbor case.
    """

    ids: np.ndarray
    dists: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        dists = np.asarray(self.dists, dtype=np.float64)
        if ids.ndim != 2 or dists.shape != ids.shape:
            raise ValueError("ids and dists must be equal-shape (N, M) arrays")
        n, m = ids.shape
        if m > 0:
            if np.any((ids < 0) | (ids >= n)):
                raise ValueError("neighbor ids out of range")
            if np.any(ids == np.arange(n)[:, None]):
                raise ValueError("a point may not be its own neighbor")
            if not np.all(np.isfinite(dists)) or np.any(dists < 0):
                raise ValueError("distances must be finite and nonnegative")
            if np.any(np.diff(dists, axis=1) < 0):
                raise ValueError("distances must be nondecreasing within a row")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "dists", dists)

    @property
    def n(self) -> int:
        return self.ids.shape[0]

    @property
    def m(self) -> int:
        return self.ids.shape[1]


def point_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean distance between two 3D points."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != (3,) or b.shape != (3,):
        raise ValueError("point_distance expects two 3-vectors")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("inputs must be finite")
    return float(np.sqrt(((a - b) ** 2).sum()))


def feature_distance(fa: np.ndarray, fb: np.ndarray) -> float:
    """Euclidean distance between two equal-length feature vectors."""
    fa = np.asarray(fa, dtype=np.float64)
    fb = np.asarray(fb, dtype=np.float64)
    if fa.shape != fb.shape or fa.ndim != 1:
        raise ValueError(f"feature dimensions differ: {fa.shape} vs {fb.shape}")
    return float(np.sqrt(((fa - fb) ** 2).sum()))


def _as_rows(data) -> np.ndarray:
    if isinstance(data, PointCloud):
        return data.points
    rows = np.asarray(data, dtype=np.float64)
    if rows.ndim != 2:
        raise ValueError(f"expected (N, D) rows, got shape {rows.shape}")
    return rows


def _exact_dists(rows: np.ndarray, i: int, cand: np.ndarray) -> np.ndarray:
    diff = rows[cand] - rows[i]
    return np.sqrt((diff**2).sum(axis=1))


def _check_m(m: int, n: int) -> None:
    if m < 0 or m > n - 1:
        raise ValueError(f"neighbor count {m} must be in [0, N-1] with N={n}")


def knn_bruteforce(data, m: int) -> NeighborIndex:
    """Exact kNN by full pairwise sort; the reference the index is tested against.

    `data` is a PointCloud (point-distance metric) or an (N, D) feature
    matrix (feature-distance metric); both reduce to Euclidean distance
    over rows.
    """
    rows = _as_rows(data)
    n = rows.shape[0]
    _check_m(m, n)
    if m == 0:
        return NeighborIndex(np.empty((n, 0), dtype=np.int64), np.empty((n, 0)))
    ids = np.empty((n, m), dtype=np.int64)
    col_ids = np.arange(n)
    # Chunk queries to cap the (chunk, N, D) difference tensor.
    chunk = max(1, min(n, int(2**22 // max(1, n * rows.shape[1]))))
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        diff = rows[lo:hi, None, :] - rows[None, :, :]
        d = np.sqrt((diff**2).sum(axis=2))
        d[np.arange(hi - lo), np.arange(lo, hi)] = np.inf  # exclude self
        order = np.lexsort((np.broadcast_to(col_ids, d.shape), d), axis=1)
        ids[lo:hi] = order[:, :m]
    dists = np.sqrt(((rows[ids] - rows[:, None, :]) ** 2).sum(axis=2))
    return NeighborIndex(ids, dists)


class SpatialIndex:
    """Exact 3D kNN answered by a kd-tree with the documented tie-break.

    Immutable once built; concurrent queries are safe.
    """

    def __init__(self, pc: PointCloud):
        self._points = pc.points
        self._tree = cKDTree(self._points)

    @property
    def n(self) -> int:
        return self._points.shape[0]

    def query_all(self, m: int) -> NeighborIndex:
        """kNN of every indexed point against the index itself."""
        pts = self._points
        n = self.n
        _check_m(m, n)
        if m == 0:
            return NeighborIndex(np.empty((n, 0), dtype=np.int64), np.empty((n, 0)))
        k2 = min(m + 2, n)
        _, cand = self._tree.query(pts, k=k2)
        ids = np.empty((n, m), dtype=np.int64)
        dists = np.empty((n, m))
        # Exact distances and (distance, id) order over the candidates.
        cd = np.sqrt(((pts[cand] - pts[:, None, :]) ** 2).sum(axis=2))
        self_mask = cand == np.arange(n)[:, None]
        cd[self_mask] = np.inf
        order = np.lexsort((cand, cd), axis=1)
        cd_sorted = np.take_along_axis(cd, order, axis=1)
        id_sorted = np.take_along_axis(cand, order, axis=1)
        # Candidate sets are complete when they cover all points, or when
        # the first excluded distance is clearly beyond the last kept one.
        if k2 == n:
            safe = np.ones(n, dtype=bool)
        else:
            gap = cd_sorted[:, m] - cd_sorted[:, m - 1]
            safe = gap > _GAP_EPS * np.maximum(1.0, cd_sorted[:, m])
        ids[safe] = id_sorted[safe, :m]
        dists[safe] = cd_sorted[safe, :m]
        for i in np.nonzero(~safe)[0]:
            r = cd_sorted[i, m - 1] * (1.0 + _RADIUS_SLACK)
            ball = np.asarray(self._tree.query_ball_point(pts[i], r), dtype=np.int64)
            ball = ball[ball != i]
            bd = _exact_dists(pts, i, ball)
            take = np.lexsort((ball, bd))[:m]
            ids[i] = ball[take]
            dists[i] = bd[take]
        return NeighborIndex(ids, dists)


def build_spatial_index(pc: PointCloud) -> SpatialIndex:
    return SpatialIndex(pc)


def knn_points(pc: PointCloud, m: int) -> NeighborIndex:
    """Receptive fields under the point-distance metric, via the spatial index."""
    return build_spatial_index(pc).query_all(m)


def knn_features(fm: np.ndarray, m: int) -> NeighborIndex:
    """Receptive fields under the feature-distance metric, exhaustive and exact."""
    return knn_bruteforce(np.asarray(fm, dtype=np.float64), m)
