"""Exact K-nearest-neighbor search over a dataset's transition set.

The tree (a KD-tree up to 15 feature dimensions, a ball tree above) only
proposes candidates. Final ranks come from distances recomputed here and
sorted by ``(distance, flat index)``, so ties always resolve to the lowest
flat index and results equal a brute-force scan exactly.
"""
from __future__ import annotations

from typing import Optional

import numpy as np
from scipy.spatial import cKDTree
from sklearn.neighbors import BallTree

from .core import Dataset, FlatRef, Metric
from .errors import InvalidInputError

KD_TREE_MAX_DIM = 15

# slack between tree distances and recomputed ones before a row is re-checked
_REL_SLACK = 1e-9
_ABS_SLACK = 1e-12
# cap on candidate entries materialized at once when expanding tied rows
_EXPAND_BUDGET = 1 << 21


def _exact_distances(points: np.ndarray, queries: np.ndarray, ids: np.ndarray) -> np.ndarray:
    diff = points[ids] - queries[:, None, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def _rank_rows(ids: np.ndarray, dist: np.ndarray, k: int):
    # sort by id, then stable by distance: lexicographic (distance, id)
    order = np.argsort(ids, axis=1, kind="stable")
    ids = np.take_along_axis(ids, order, axis=1)
    dist = np.take_along_axis(dist, order, axis=1)
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return np.take_along_axis(ids, order, axis=1), np.take_along_axis(dist, order, axis=1)


class PointIndex:
    """Immutable exact K-NN structure over an ``(m, p)`` feature matrix.

    Identical rows are collapsed before the tree is built; each distinct row
    keeps its ids in ascending order, which keeps heavily tied data (integer
    features) cheap to query.
    """

    def __init__(self, points, kind: Optional[str] = None):
        points = np.ascontiguousarray(points, dtype=float)
        if points.ndim != 2 or len(points) == 0:
            raise InvalidInputError("cannot index an empty point set")
        points.flags.writeable = False
        self.points = points
        uniq, inverse = np.unique(points, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        order = np.argsort(inverse, kind="stable")
        self._uniq = np.ascontiguousarray(uniq)
        self._inverse = inverse.astype(np.int64)
        self._group_ids = order.astype(np.int64)
        self._group_size = np.bincount(inverse, minlength=len(uniq))
        self._group_start = np.concatenate([[0], np.cumsum(self._group_size)[:-1]])
        self._singletons = bool(self._group_size.max() == 1)
        if kind is None:
            kind = "kd" if points.shape[1] <= KD_TREE_MAX_DIM else "ball"
        if kind == "kd":
            self._tree = cKDTree(self._uniq)
        elif kind == "ball":
            self._tree = BallTree(self._uniq)
        else:
            raise InvalidInputError(f"unknown tree kind {kind!r}")
        self.kind = kind

    def __len__(self) -> int:
        return len(self.points)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def _tree_query(self, Q: np.ndarray, k: int):
        if self.kind == "kd":
            d, ids = self._tree.query(Q, k=k)
            return np.asarray(d).reshape(len(Q), k), np.asarray(ids).reshape(len(Q), k)
        d, ids = self._tree.query(Q, k=k, return_distance=True, sort_results=True)
        return d, ids

    def _expand(self, uids: np.ndarray, udist: np.ndarray, kth: np.ndarray, k: int):
        """Top-``k`` ids over distance-sorted distinct rows ``uids`` (r, c)."""
        if self._singletons:
            return _rank_rows(self._group_ids[self._group_start[uids]], udist, k)
        r, c = uids.shape
        m = len(self.points)
        # dense distance rank per column; only rows within the k-th distance matter
        step = np.ones((r, c), dtype=np.int64)
        step[:, 1:] = udist[:, 1:] != udist[:, :-1]
        dense = np.cumsum(step, axis=1)
        # the k lowest ids of each distinct row are the only ones that can rank
        take = np.where(udist <= kth[:, None], np.minimum(self._group_size[uids], k), 0)
        flat = take.reshape(-1)
        total = int(flat.sum())
        seg = np.repeat(np.arange(r * c), flat)
        offs = np.arange(total) - np.repeat(np.cumsum(flat) - flat, flat)
        ids = self._group_ids[self._group_start[uids.reshape(-1)[seg]] + offs]
        row = seg // c
        key = (row * (c + 1) + dense.reshape(-1)[seg]) * m + ids
        order = np.argsort(key, kind="stable")
        per_row = take.sum(axis=1)
        pick = (np.cumsum(per_row) - per_row)[:, None] + np.arange(k)[None, :]
        chosen = order[pick]
        return ids[chosen], udist.reshape(-1)[seg[chosen]]

    def _expand_settled(self, uids, udist, kth, k, out_ids, out_d, rows):
        order = np.argsort(udist, axis=1, kind="stable")
        uids = np.take_along_axis(uids, order, axis=1)
        udist = np.take_along_axis(udist, order, axis=1)
        ncols = int(np.max(np.sum(udist <= kth[:, None], axis=1)))
        uids, udist = uids[:, :ncols], udist[:, :ncols]
        step = max(1, _EXPAND_BUDGET // max(1, ncols * k))
        for lo in range(0, len(uids), step):
            sl = slice(lo, lo + step)
            ri, rd = self._expand(uids[sl], udist[sl], kth[sl], k)
            out_ids[rows[sl]] = ri
            out_d[rows[sl]] = rd

    def query(self, queries, k: int):
        """``k`` nearest points of every query row.

        Returns ``(ids, dist)``, both ``(r, k)``, rows sorted by nondecreasing
        distance with ties in ascending id order.
        """
        Q = np.ascontiguousarray(np.atleast_2d(np.asarray(queries, dtype=float)))
        m = len(self.points)
        if Q.shape[1] != self.dim:
            raise InvalidInputError(f"query dimension {Q.shape[1]} != index dimension {self.dim}")
        if not 1 <= k <= m:
            raise InvalidInputError(f"k must lie in 1..{m}, got {k}")
        if len(Q) > 1:
            Qu, qinv = np.unique(Q, axis=0, return_inverse=True)
            if len(Qu) < len(Q):
                ids, dist = self._query_unique(np.ascontiguousarray(Qu), k)
                qinv = qinv.reshape(-1)
                return ids[qinv], dist[qinv]
        return self._query_unique(Q, k)

    def _query_unique(self, Q: np.ndarray, k: int):
        m, mu = len(self.points), len(self._uniq)
        out_ids = np.empty((len(Q), k), dtype=np.int64)
        out_d = np.empty((len(Q), k))
        pending = np.arange(len(Q))
        # distinct rows carry m / mu points on average: ask for enough rows to cover k
        kq = min(mu, k + 1 if self._singletons else max(4, -(-2 * k * mu // m) + 1))
        while len(pending):
            Qp = Q[pending]
            tree_d, uids = self._tree_query(Qp, kq)
            uids = uids.astype(np.int64)
            udist = _exact_distances(self._uniq, Qp, uids)
            order = np.argsort(udist, axis=1, kind="stable")
            sd = np.take_along_axis(udist, order, axis=1)
            cum = np.cumsum(self._group_size[np.take_along_axis(uids, order, axis=1)], axis=1)
            enough = cum[:, -1] >= k
            at = np.argmax(cum >= k, axis=1)
            kth = sd[np.arange(len(Qp)), at]
            # settled: count reached and every distinct row left out lies strictly farther
            settled = enough & (tree_d[:, -1] > kth * (1.0 + _REL_SLACK) + _ABS_SLACK)
            if kq == mu:
                settled[:] = True
            if np.any(settled):
                self._expand_settled(uids[settled], udist[settled], kth[settled], k, out_ids, out_d, pending[settled])
            pending = pending[~settled]
            kq = min(2 * kq, mu)
        return out_ids, out_d

    def tie_group(self, query, dist: float) -> np.ndarray:
        """All ids at exactly distance ``dist`` from ``query``, ascending."""
        q = np.asarray(query, dtype=float).reshape(1, -1)
        uids = self._tie_uids(q[0], float(dist))
        return np.sort(np.concatenate([self._group_ids[self._group_start[u] : self._group_start[u] + self._group_size[u]] for u in uids]))

    def _tie_uids(self, q: np.ndarray, dist: float) -> np.ndarray:
        r = dist * (1.0 + _REL_SLACK) + _ABS_SLACK
        if self.kind == "kd":
            cand = np.asarray(self._tree.query_ball_point(q, r), dtype=np.int64)
        else:
            cand = self._tree.query_radius(q[None, :], r)[0].astype(np.int64)
        cand = np.sort(cand)
        d = _exact_distances(self._uniq, q[None, :], cand[None, :])[0]
        return cand[d == dist]

    def sample_ties(self, queries, ids, dist, u) -> np.ndarray:
        """Replace each ``ids[i]`` by a uniform draw from its tie group.

        ``ids[i]`` must be a point at distance ``dist[i]`` from ``queries[i]``;
        the draw uses ``u[i]`` in ``[0, 1)``. Ranking under random tie-breaking
        puts a uniformly chosen member of the tie group at any given rank.
        """
        Q = np.atleast_2d(np.asarray(queries, dtype=float))
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        dist = np.asarray(dist, dtype=float).reshape(-1)
        u = np.asarray(u, dtype=float).reshape(-1)
        out = np.empty_like(ids)
        # distance zero: the tie group is the set of rows identical to the hit
        zero = dist == 0.0
        g = self._inverse[ids[zero]]
        off = np.minimum((u[zero] * self._group_size[g]).astype(np.int64), self._group_size[g] - 1)
        out[zero] = self._group_ids[self._group_start[g] + off]
        for i in np.flatnonzero(~zero):
            uids = self._tie_uids(Q[i], dist[i])
            sizes = self._group_size[uids]
            k = min(int(u[i] * sizes.sum()), int(sizes.sum()) - 1)
            cum = np.cumsum(sizes)
            j = int(np.searchsorted(cum, k, side="right"))
            out[i] = self._group_ids[self._group_start[uids[j]] + k - (cum[j] - sizes[j])]
        return out


def brute_force_knn(points, query, k: int):
    """Linear-scan reference with the same ``(distance, index)`` ordering."""
    points = np.asarray(points, dtype=float)
    q = np.asarray(query, dtype=float).reshape(1, -1)
    diff = points - q
    d = np.sqrt(np.sum(diff * diff, axis=-1))
    order = np.lexsort((np.arange(len(points)), d))[:k]
    return order, d[order]


class NeighborIndex:
    """K-NN index over the transition set of a dataset.

    Tree slot ``k`` is the flat transition index ``k`` of the dataset.
    """

    def __init__(self, dataset: Dataset, metric: Metric, kind: Optional[str] = None):
        ts = dataset.transitions
        if len(ts) == 0:
            raise InvalidInputError("dataset has no transitions to index")
        self.dataset = dataset
        self.metric = metric
        self.features = metric.features(ts.states, ts.actions)
        self.points = PointIndex(self.features, kind=kind)

    @property
    def point_count(self) -> int:
        return len(self.points)

    @property
    def kind(self) -> str:
        return self.points.kind

    def ref(self, slot: int) -> FlatRef:
        ts = self.dataset.transitions
        return FlatRef(int(ts.episode[slot]), int(ts.time[slot]))

    def query_features(self, features, k: int):
        return self.points.query(features, k)

    def query_batch(self, states, actions, k: int):
        return self.points.query(self.metric.features(states, actions), k)


def build_index(dataset: Dataset, metric: Metric, kind: Optional[str] = None) -> NeighborIndex:
    return NeighborIndex(dataset, metric, kind=kind)


def query_knn(index: NeighborIndex, point, k: int) -> list[tuple[FlatRef, float]]:
    """``k`` nearest transitions of one ``(state, action)`` pair."""
    state, action = point
    ids, dist = index.query_batch(state, action, k)
    return [(index.ref(int(s)), float(d)) for s, d in zip(ids[0], dist[0])]
