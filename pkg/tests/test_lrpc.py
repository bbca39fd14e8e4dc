import datetime as dt
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from busdensity.data import TripRecord
from busdensity.density import integrate
from busdensity.lrpc import (FEATURE_DIM, ClassGrid, LrpcModel, SkippedRoute, encode_lrpc_features,
                             encode_lrpc_matrix, fit_lrpc, predict_pmf, smooth_pmf, softmax)

MON = dt.date(2017, 9, 4)


def trip(i, dep, tt, route="A-East"):
    return TripRecord(f"{route}-{i:05d}", route, MON, "Mon", 36, dep, dep, dep + tt, 10, 5.0, "residential")


def separable_route(n=2000, seed=0):
    """Travel-time class fixed by the hour of departure."""
    rng = np.random.default_rng(seed)
    deps = rng.uniform(0, 1320, n)
    hour = np.floor(deps / 60).astype(int)
    tt = 20 + (hour * 7) % 11 + rng.uniform(0.05, 0.95, n)
    return [trip(i, float(d), float(t)) for i, (d, t) in enumerate(zip(deps, tt))]


class TestEncoding:
    def test_0930(self):
        x = encode_lrpc_features(5 * 60 + 30)
        assert len(x) == FEATURE_DIM == 69
        assert np.flatnonzero(x[:22]).tolist() == [5]
        assert np.flatnonzero(x[22:66]).tolist() == [11]

    def test_0400_boundary(self):
        x = encode_lrpc_features(0.0)
        assert x[0] == 1 and x[22] == 1
        angle = 2 * math.pi * 240 / 1440
        assert x[66] == pytest.approx(math.sin(angle)) and x[67] == pytest.approx(math.cos(angle))
        assert x[68] == 0.0

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0.0, 1319.999))
    def test_structure(self, dep):
        x = encode_lrpc_features(dep)
        assert len(x) == 69
        assert x[:22].sum() == 1 and x[22:66].sum() == 1
        assert np.count_nonzero(x[:66]) == 2
        assert 0 <= x[68] < 1 and x[66] ** 2 + x[67] ** 2 == pytest.approx(1)

    @pytest.mark.parametrize("dep", [-0.1, 1320.0])
    def test_out_of_span(self, dep):
        with pytest.raises(ValueError):
            encode_lrpc_features(dep)

    def test_matrix_matches_rows(self):
        deps = np.array([0.0, 59.9, 60.0, 1319.0])
        np.testing.assert_array_equal(encode_lrpc_matrix(deps), np.stack([encode_lrpc_features(d) for d in deps]))


class TestSoftmax:
    def test_normalization_random_inputs(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            s = rng.normal(0, rng.uniform(0.1, 300), rng.integers(1, 60))
            p = softmax(s)
            assert np.all(p > 0) or np.max(s) - np.min(s) > 700
            assert abs(p.sum() - 1) < 1e-9

    def test_shift_invariance_and_naive_oracle(self):
        rng = np.random.default_rng(1)
        W = rng.normal(0, 0.01, (12, 70))
        model = LrpcModel("A-East", ClassGrid(20, 12), W, 0.0)
        shifted = LrpcModel("A-East", ClassGrid(20, 12), W + rng.normal(size=70), 0.0)
        for dep in (0.0, 333.3, 1200.0):
            p = predict_pmf(model, dep)
            np.testing.assert_allclose(predict_pmf(shifted, dep), p, atol=1e-12)
            x = np.append(encode_lrpc_features(dep), 1.0)
            e = np.exp(W @ x)
            np.testing.assert_allclose(p, e / e.sum(), atol=1e-12)

    def test_zero_weights_uniform(self):
        model = LrpcModel("A-East", ClassGrid(20, 7), np.zeros((7, 70)), 0.0)
        assert np.all(predict_pmf(model, 100.0) == 1 / 7)


class TestGrid:
    def test_from_travel_times(self):
        g = ClassGrid.from_travel_times([20.4, 25.0, 31.2])
        assert (g.t_min, g.C) == (20, 12)
        assert g.class_of([20.4, 31.2, 19.0, 99.0]).tolist() == [0, 11, 0, 11]
        assert g.centers[0] == 20.0

    def test_single_class_route(self):
        trips = [trip(i, float(10 * i), 30.2 + 0.01 * i) for i in range(12)]
        m = fit_lrpc(trips)
        assert m.grid.C == 1
        assert predict_pmf(m, 500.0).tolist() == [1.0]


class TestFit:
    def test_separable_route_accuracy(self):
        trips = separable_route()
        m = fit_lrpc(trips, lam=1e-4, seed=0)
        deps = np.array([t.scheduled_departure for t in trips])
        y = m.grid.class_of([t.travel_time for t in trips])
        acc = np.mean(np.argmax(m.predict_pmf_matrix(deps), axis=1) == y)
        assert acc > 0.95

    def test_loss_contract_and_determinism(self):
        trips = separable_route(300, seed=2)
        a = fit_lrpc(trips, seed=5, epochs=20)
        b = fit_lrpc(trips, seed=5, epochs=20)
        assert min(a.loss_trace) <= a.loss_trace[0]
        assert a.weights.tobytes() == b.weights.tobytes()
        assert a.loss_trace == b.loss_trace and len(a.loss_trace) == 21

    def test_too_few_trips(self):
        with pytest.raises(SkippedRoute):
            fit_lrpc([trip(i, 10.0 * i, 30.0) for i in range(9)])

    def test_single_route_only(self):
        with pytest.raises(ValueError):
            fit_lrpc([trip(i, 10.0 * i, 30.0, "AB"[i % 2] + "-East") for i in range(20)])

    def test_regularization_shrinks_norm(self):
        trips = separable_route(400, seed=3)
        norms = []
        for lam in (1e-4, 1e-3, 1e-2, 1e-1, 1.0):
            W = fit_lrpc(trips, lam=lam, seed=0, epochs=60).weights
            norms.append(float(np.sum(W[:, :-1] ** 2)))
        assert all(b <= a * (1 + 1e-6) for a, b in zip(norms, norms[1:]))

    def test_empty_class_gets_positive_probability(self):
        trips = [trip(i, 10.0 * i, 20.5 if i % 2 else 29.5) for i in range(30)]
        m = fit_lrpc(trips, epochs=10)
        p = predict_pmf(m, 100.0)
        assert len(p) == 10 and np.all(p > 0)

    def test_json_round_trip_exact(self):
        m = fit_lrpc(separable_route(200), epochs=5)
        back = LrpcModel.from_dict(json.loads(json.dumps(m.to_dict())))
        assert back.weights.tobytes() == m.weights.tobytes() and back.grid == m.grid


class TestSmoothing:
    def test_point_mass_is_single_gaussian(self):
        grid = ClassGrid(20, 10)
        pmf = np.zeros(10)
        pmf[3] = 1.0
        d = smooth_pmf(pmf, grid, "gaussian", 1.5)
        t = np.linspace(15, 30, 31)
        np.testing.assert_allclose(d.pdf(t), np.exp(-0.5 * ((t - 23) / 1.5) ** 2) / (1.5 * math.sqrt(2 * math.pi)),
                                   rtol=1e-12)

    def test_uniform_comb_bumps(self):
        grid = ClassGrid(20, 6)
        d = smooth_pmf(np.full(6, 1 / 6), grid, "gaussian", 0.05)
        for c in range(6):
            t = np.linspace(20 + c - 0.5, 20 + c + 0.5, 4001)
            assert np.trapezoid(d.pdf(t), t) == pytest.approx(1 / 6, abs=1e-6)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=50), st.sampled_from(["gaussian", "epanechnikov"]),
           st.floats(0.25, 4.0))
    def test_mass_one(self, w, kernel, h):
        pmf = np.asarray(w) / np.sum(w)
        d = smooth_pmf(pmf, ClassGrid(15, len(pmf)), kernel, h)
        assert abs(integrate(d) - 1) < 1e-3

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            smooth_pmf([0.5, 0.6], ClassGrid(0, 2))
        with pytest.raises(ValueError):
            smooth_pmf([0.5, 0.5], ClassGrid(0, 2), h=0.0)
        with pytest.raises(ValueError):
            smooth_pmf([1.0], ClassGrid(0, 2))

    def test_vectorized_logpdf_matches_density(self):
        m = fit_lrpc(separable_route(300), epochs=5, h=2.0)
        deps = np.array([10.0, 500.0, 1000.0])
        tt = np.array([22.0, 25.5, 40.0])
        got = m.logpdf(deps, tt)
        for i in range(3):
            assert got[i] == pytest.approx(math.log(m.density(deps[i]).pdf(tt[i])), rel=1e-12)
