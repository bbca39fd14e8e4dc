"""Selection of similar training trips: departure-time windows and kNN.

Both selectors work per route.  The list-returning functions operate on one
query; :func:`edtw_groups` and :func:`knn_neighbors` are the batched forms
used by the estimators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import SERVICE_SPAN, FeatureSchema, FeatureVector, TripRecord, as_table, encode_table

# 04:00, 06:00, 09:00, 14:00, 18:00, 26:00 on the service clock
FIVE_PERIOD_BOUNDS = (0.0, 120.0, 300.0, 600.0, 840.0, SERVICE_SPAN)
KNN_FEATURES = (("scheduled_departure", "minmax"), ("week_number", "minmax"))


class NoSimilarTrips(LookupError):
    pass


@dataclass(frozen=True)
class DtwSpec:
    mode: str = "minutes"  # "minutes" or "five_periods"
    width: float = 60.0

    def __post_init__(self):
        if self.mode not in ("minutes", "five_periods"):
            raise ValueError(f"unknown DTW mode {self.mode!r}")
        if self.mode == "minutes" and not self.width > 0:
            raise ValueError("window width must be positive")

    @classmethod
    def parse(cls, text: str | int | float) -> "DtwSpec":
        if str(text) in ("five_periods", "5p", "periods"):
            return cls("five_periods")
        return cls("minutes", float(text))

    @property
    def label(self) -> str:
        return "five_periods" if self.mode == "five_periods" else f"{self.width:g}"

    @property
    def boundaries(self) -> np.ndarray:
        if self.mode == "five_periods":
            return np.asarray(FIVE_PERIOD_BOUNDS)
        n = int(math.ceil(SERVICE_SPAN / self.width))
        return np.minimum(np.arange(n + 1) * self.width, SERVICE_SPAN)

    def window_index(self, dep) -> np.ndarray:
        b = self.boundaries
        return np.clip(np.searchsorted(b, dep, side="right") - 1, 0, len(b) - 2)


@dataclass(frozen=True)
class KnnSpec:
    k: int = 13
    features: tuple[tuple[str, str], ...] = KNN_FEATURES

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")


class Selection(list):
    """A list of selected trips; ``short`` is set when fewer than k existed."""

    short: bool = False


def euclidean_distance(x: FeatureVector, y: FeatureVector) -> float:
    if x.schema != y.schema or len(x) != len(y):
        raise ValueError("feature vectors come from different schemas")
    return math.sqrt(sum((a - b) ** 2 for a, b in zip(x.values.tolist(), y.values.tolist())))


def select_edtw(query: TripRecord, training: Sequence[TripRecord], spec: DtwSpec) -> list[TripRecord]:
    w = spec.window_index(query.scheduled_departure)
    out = [t for t in training
           if t.route_id == query.route_id and spec.window_index(t.scheduled_departure) == w]
    if not out:
        raise NoSimilarTrips(f"no training trip of route {query.route_id} in window {int(w)}")
    return out


def _knn_order_key(dist: float, t: TripRecord):
    return (dist, t.date, t.trip_id)


def select_knn(query: TripRecord, training: Sequence[TripRecord], spec: KnnSpec,
               schema: FeatureSchema | None = None) -> Selection:
    """The k closest same-route trips; ties go to the earlier date, then trip_id."""
    from .data import encode_features

    same = [t for t in training if t.route_id == query.route_id]
    if not same:
        raise NoSimilarTrips(f"no training trip of route {query.route_id}")
    schema = schema or FeatureSchema.fit(training, spec.features)
    q = encode_features(query, schema)
    ranked = sorted(same, key=lambda t: _knn_order_key(euclidean_distance(q, encode_features(t, schema)), t))
    sel = Selection(ranked[: spec.k])
    sel.short = len(same) < spec.k
    return sel


# ---------------------------------------------------------------------------
# Batched selection
# ---------------------------------------------------------------------------

@dataclass
class Groups:
    """Queries mapped onto distinct training subsamples."""

    query_group: np.ndarray          # (Q,) group id per query, -1 when unresolvable
    members: list[np.ndarray]        # pool row indices per group
    fallback: np.ndarray             # (Q,) query needed a neighbouring window

    def padded(self, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(G, m_max) matrix of ``values[members]`` and its validity mask."""
        m = max((len(g) for g in self.members), default=1)
        X = np.zeros((len(self.members), m))
        mask = np.zeros((len(self.members), m), dtype=bool)
        for i, g in enumerate(self.members):
            X[i, : len(g)] = values[g]
            mask[i, : len(g)] = True
        return X, mask


def edtw_groups(queries, pool, spec: DtwSpec) -> Groups:
    """One group per (route, window).  Empty windows fall back to the nearest
    non-empty window of the same route (earlier window on ties)."""
    queries, pool = as_table(queries), as_table(pool)
    pool_routes = pool.route_groups()
    pw = spec.window_index(pool.dep)
    qw = spec.window_index(queries.dep)
    key_to_group: dict[tuple[str, int], int] = {}
    members: list[np.ndarray] = []
    qg = np.full(len(queries), -1, dtype=int)
    fallback = np.zeros(len(queries), dtype=bool)
    for i in range(len(queries)):
        route, w = queries.route_ids[i], int(qw[i])
        idx = pool_routes.get(route)
        if idx is None:
            continue
        wins = pw[idx]
        if not np.any(wins == w):
            present = np.unique(wins)
            w_use = int(present[np.argmin(np.abs(present - w) * 2 + (present > w))])
            fallback[i] = True
        else:
            w_use = w
        key = (route, w_use)
        if key not in key_to_group:
            key_to_group[key] = len(members)
            members.append(idx[wins == w_use])
        qg[i] = key_to_group[key]
    return Groups(qg, members, fallback)


def knn_neighbors(queries, pool, k: int, schema: FeatureSchema | None = None,
                  features=KNN_FEATURES) -> tuple[np.ndarray, np.ndarray]:
    """Ordered same-route neighbours of each query.

    Returns ``(idx, count)``: ``idx`` is (Q, k) pool row indices sorted by
    (distance, date, trip_id), padded with -1 past ``count`` when the route
    has fewer than k trips.  Prefixes of ``idx`` are the neighbour sets for
    every smaller k.
    """
    queries, pool = as_table(queries), as_table(pool)
    schema = schema or FeatureSchema.fit(pool.trips, features)
    Xq = encode_table(queries, schema)
    Xp = encode_table(pool, schema)
    # rank of each pool row in (date, trip_id) order: the tie-breaker
    order = sorted(range(len(pool)), key=lambda i: (pool.date_ordinal[i], pool.ids[i]))
    rank = np.empty(len(pool), dtype=np.int64)
    rank[order] = np.arange(len(pool))

    out = np.full((len(queries), k), -1, dtype=int)
    count = np.zeros(len(queries), dtype=int)
    q_groups = queries.route_groups()
    p_groups = pool.route_groups()
    for route, qi in q_groups.items():
        pi = p_groups.get(route)
        if pi is None:
            continue
        diff = Xq[qi][:, None, :] - Xp[pi][None, :, :]
        dist = np.sqrt(np.sum(diff * diff, axis=-1))
        tie = np.broadcast_to(rank[pi], dist.shape)
        srt = np.lexsort((tie, dist), axis=-1)[:, :k]
        n = srt.shape[1]
        out[qi, :n] = pi[srt]
        count[qi] = n
    return out, count


def knn_groups(idx: np.ndarray, count: np.ndarray, k: int) -> Groups:
    """Collapse queries with identical k-neighbour sets into shared groups."""
    Q = len(idx)
    qg = np.full(Q, -1, dtype=int)
    members: list[np.ndarray] = []
    if Q == 0:
        return Groups(qg, members, np.zeros(0, dtype=bool))
    kk = np.minimum(count, k)
    sub = np.where(np.arange(k)[None, :] < kk[:, None], idx[:, :k], -1)
    canon = np.sort(sub, axis=1)
    valid = kk > 0
    uniq, inv = np.unique(canon[valid], axis=0, return_inverse=True)
    qg[valid] = inv.reshape(-1)
    members = [row[row >= 0] for row in uniq]
    return Groups(qg, members, np.zeros(Q, dtype=bool))
