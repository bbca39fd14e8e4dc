import datetime as dt
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from busdensity.data import FeatureSchema, FeatureVector, TripRecord, as_table, encode_table
from busdensity.similarity import (FIVE_PERIOD_BOUNDS, KNN_FEATURES, DtwSpec, KnnSpec, NoSimilarTrips,
                                   edtw_groups, euclidean_distance, knn_groups, knn_neighbors, select_edtw,
                                   select_knn)

MON = dt.date(2017, 9, 4)


def trip(i, dep, route="A-East", date=MON, tt=30.0):
    return TripRecord(f"{route}-{i:04d}", route, date, ("Mon", "Tue", "Wed", "Thu", "Fri")[date.weekday()],
                      date.isocalendar()[1], dep, dep, dep + tt, 10, 5.0, "residential")


def clock(hh, mm=0):
    return (hh - 4) * 60 + mm


def vec(values):
    schema = FeatureSchema((("x", "raw"),) * len(values))
    return FeatureVector(np.asarray(values, float), schema)


class TestDistance:
    def test_identity_and_345(self):
        assert euclidean_distance(vec([1, 2]), vec([1, 2])) == 0.0
        assert euclidean_distance(vec([0, 0]), vec([3, 4])) == 5.0

    def test_schema_mismatch(self):
        with pytest.raises(ValueError):
            euclidean_distance(vec([0, 0]), vec([0, 0, 0]))

    def test_random_pairs_match_norm(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a, b = rng.normal(size=10), rng.normal(size=10)
            assert abs(euclidean_distance(vec(a), vec(b)) - math.sqrt(sum((a - b) ** 2))) < 1e-12


class TestDtw:
    def test_five_periods_partition(self):
        spec = DtwSpec.parse("five_periods")
        b = spec.boundaries
        assert b.tolist() == list(FIVE_PERIOD_BOUNDS)
        deps = np.arange(0, 1320, 0.5)
        w = spec.window_index(deps)
        assert set(w.tolist()) == set(range(5))
        assert np.all(np.diff(w) >= 0)

    @pytest.mark.parametrize("width", ["60", "30", 45])
    def test_minute_windows_partition(self, width):
        spec = DtwSpec.parse(width)
        b = spec.boundaries
        assert b[0] == 0 and b[-1] == 1320 and np.all(np.diff(b) > 0)

    def test_query_at_0910_selects_0900_to_1000(self):
        train = [trip(i, float(d)) for i, d in enumerate(range(0, 1320, 7))]
        train.append(trip(999, clock(9, 30), route="B-East"))
        sel = select_edtw(trip(-1, clock(9, 10)), train, DtwSpec.parse(60))
        assert sel and all(t.route_id == "A-East" for t in sel)
        assert {t.trip_id for t in sel} == {t.trip_id for t in train if t.route_id == "A-East"
                                            and clock(9) <= t.scheduled_departure < clock(10)}

    def test_five_period_before_morning_peak(self):
        train = [trip(i, float(d)) for i, d in enumerate(range(0, 1320, 11))]
        sel = select_edtw(trip(-1, clock(5)), train, DtwSpec.parse("five_periods"))
        assert {t.trip_id for t in sel} == {t.trip_id for t in train if t.scheduled_departure < clock(6)}

    def test_route_absent(self):
        with pytest.raises(NoSimilarTrips):
            select_edtw(trip(-1, 100.0, "Z-West"), [trip(0, 100.0)], DtwSpec())

    def test_batched_groups_match_scalar(self, small_split):
        spec = DtwSpec.parse(30)
        pool = small_split.reduced_training
        queries = small_split.validation[:300]
        g = edtw_groups(queries, pool, spec)
        pool_ids = as_table(pool).ids
        for i, q in enumerate(queries):
            try:
                expect = sorted(t.trip_id for t in select_edtw(q, pool, spec))
                assert not g.fallback[i]
            except NoSimilarTrips:
                assert g.fallback[i]
                continue
            assert sorted(pool_ids[j] for j in g.members[g.query_group[i]]) == expect

    def test_partition_consistency(self, small_split):
        spec = DtwSpec.parse(60)
        pool = small_split.reduced_training
        q1, q2 = trip(-1, clock(9, 5), "A-East"), trip(-2, clock(9, 55), "A-East", MON + dt.timedelta(days=1))
        assert select_edtw(q1, pool, spec) == select_edtw(q2, pool, spec)


def brute_knn(query, pool, k):
    same = [t for t in pool if t.route_id == query.route_id]
    schema = FeatureSchema.fit(pool, KNN_FEATURES)
    qv = encode_table([query], schema)[0]
    d = [(float(np.sqrt(np.sum((encode_table([t], schema)[0] - qv) ** 2))), t.date, t.trip_id) for t in same]
    return [x[2] for x in sorted(d)[:k]]


class TestKnn:
    def test_identity_k1(self):
        pool = [trip(i, float(10 * i)) for i in range(20)]
        assert select_knn(pool[7], pool, KnnSpec(1))[0] is pool[7]

    def test_exhaustion(self):
        pool = [trip(0, 0.0), trip(1, 600.0), trip(2, 1300.0), trip(3, 5.0, "B-East")]
        sel = select_knn(trip(-1, 1.0), pool, KnnSpec(3))
        assert len(sel) == 3 and not sel.short
        sel = select_knn(trip(-1, 1.0), pool, KnnSpec(5))
        assert len(sel) == 3 and sel.short

    def test_empty_route(self):
        with pytest.raises(NoSimilarTrips):
            select_knn(trip(-1, 1.0, "Z-East"), [trip(0, 0.0)], KnnSpec())

    def test_k13_matches_brute_force(self, small_split):
        pool = small_split.reduced_training
        for q in small_split.test[::97]:
            got = [t.trip_id for t in select_knn(q, pool, KnnSpec(13))]
            assert got == brute_knn(q, pool, 13)

    def test_batched_matches_scalar(self, small_split):
        pool, queries = small_split.reduced_training, small_split.test[::41]
        idx, count = knn_neighbors(queries, pool, 13)
        ids = as_table(pool).ids
        for i, q in enumerate(queries):
            assert [ids[j] for j in idx[i, :count[i]]] == [t.trip_id for t in select_knn(q, pool, KnnSpec(13))]

    def test_tie_break_earlier_date_then_id(self):
        d2 = MON + dt.timedelta(days=1)
        pool = [trip(5, 100.0, date=MON), trip(3, 100.0, date=MON), trip(1, 100.0, date=d2), trip(9, 900.0, date=d2)]
        q = trip(-1, 100.0, date=d2)
        # week equal for all, departure equal for three of them
        got = [t.trip_id for t in select_knn(q, pool, KnnSpec(2))]
        assert got == ["A-East-0003", "A-East-0005"]

    def test_k_equal_route_size_is_whole_route(self, small_split):
        pool = small_split.reduced_training
        q = small_split.test[0]
        n = sum(t.route_id == q.route_id for t in pool)
        sel = select_knn(q, pool, KnnSpec(n))
        assert {t.trip_id for t in sel} == {t.trip_id for t in pool if t.route_id == q.route_id}

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 1319), st.integers(0, 9)), min_size=1, max_size=30),
           st.floats(0, 1319), st.integers(1, 12))
    def test_size_and_dominance(self, rows, qdep, k):
        pool = [trip(i, d, date=MON + dt.timedelta(days=day % 5 + 7 * (day // 5))) for i, (d, day) in enumerate(rows)]
        q = trip(-1, qdep, date=MON)
        sel = select_knn(q, pool, KnnSpec(k))
        assert len(sel) == min(k, len(pool))
        schema = FeatureSchema.fit(pool, KNN_FEATURES)
        dist = {t.trip_id: float(np.linalg.norm(encode_table([t], schema)[0] - encode_table([q], schema)[0]))
                for t in pool}
        chosen = {t.trip_id for t in sel}
        worst = max(dist[c] for c in chosen)
        assert all(dist[t.trip_id] >= worst - 1e-12 for t in pool if t.trip_id not in chosen)
        assert chosen <= set(dist)

    def test_groups_share_identical_sets(self):
        idx = np.array([[0, 1, 2], [2, 1, 0], [0, 1, 3], [-1, -1, -1]])
        count = np.array([3, 3, 3, 0])
        g = knn_groups(idx, count, 3)
        assert g.query_group[0] == g.query_group[1] != g.query_group[2]
        assert g.query_group[3] == -1
        g2 = knn_groups(idx, count, 2)
        assert g2.query_group[0] == g2.query_group[2]
