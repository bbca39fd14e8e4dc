import json

import numpy as np
import pytest

from busdensity.data import as_table
from busdensity.density import integrate
from busdensity.estimators import (ESTIMATORS, ModelConfig, make_predictor, predictor_from_dict,
                                   predictor_to_dict, split_model_list)


def test_parse_basic():
    c = ModelConfig.parse("kde:knn[h=2;kernel=epanechnikov;k=20]")
    assert (c.estimator, c.similarity, c.h, c.kernel, c.k) == ("kde", "knn", 2.0, "epanechnikov", 20)
    assert c.label == "kde:knn"
    assert ModelConfig.parse("forest[n_trees=10;max_depth=none;max_features=0.5]").forest_params == {
        "n_trees": 10, "max_depth": None, "max_features": 0.5, "min_samples_split": 5}


@pytest.mark.parametrize("text", ["kde", "lrpc:knn", "bogus:knn", "kde:knn[zeta=1]", "kde:knn[h=-1]",
                                  "gamma:edtw[dtw=hourly]", "gamma:edtw[dtw=-5]", "+++"])
def test_parse_rejects(text):
    with pytest.raises(ValueError):
        ModelConfig.parse(text)


def test_split_model_list_keeps_brackets():
    cs = split_model_list("kde:knn[h=2;k=5],loglogistic:knn , lrpc,forest[n_trees=5]")
    assert [c.label for c in cs] == ["kde:knn", "loglogistic:knn", "lrpc", "forest"]
    assert cs[0].k == 5 and cs[3].forest_params["n_trees"] == 5


@pytest.mark.parametrize("text", ["normal:edtw[dtw=30]", "gmm:knn[n_components=2]", "kde:edtw[dtw=five_periods]",
                                  "lrpc[lam=0.01;h=2]", "forest[max_depth=6]"])
def test_config_round_trip(text):
    c = ModelConfig.parse(text)
    assert ModelConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c


def test_hyperparameters_only_relevant():
    assert ModelConfig.parse("gamma:knn").hyperparameters() == {"k": 13}
    assert set(ModelConfig.parse("lrpc").hyperparameters()) == {"kernel", "h", "lam"}


SPECS = ["normal:knn", "lognormal:edtw", "cauchy:knn", "gmm:knn[n_components=2]", "kde:edtw[h=2]",
         "lrpc[h=2]", "forest[n_trees=12;max_depth=8]"]


@pytest.fixture(scope="module")
def fitted(small_split):
    return {s: make_predictor(ModelConfig.parse(s)).fit(small_split.reduced_training, seed=3) for s in SPECS}


@pytest.mark.parametrize("spec", SPECS)
def test_prediction_matches_densities(spec, fitted, small_split):
    p = fitted[spec]
    q = as_table(small_split.validation[::37])
    pred = p.predict(q)
    dens = p.densities(q)
    got = np.array([np.ravel(d._raw_logpdf(t.travel_time))[0] for d, t in zip(dens, q.trips)])
    np.testing.assert_allclose(pred.logpdf, got, rtol=1e-9, atol=1e-9)
    assert pred.mean_defined == (not spec.startswith("cauchy"))
    if pred.mean_defined:
        means = np.array([d.mean() for d in dens])
        np.testing.assert_allclose(pred.mean, means, rtol=1e-6)
    for d in dens[:3]:
        assert integrate(d) == pytest.approx(1.0, abs=1e-3)


@pytest.mark.parametrize("spec", SPECS)
def test_serialized_predictor_predicts_identically(spec, fitted, small_split):
    p = fitted[spec]
    back = predictor_from_dict(json.loads(json.dumps(predictor_to_dict(p))))
    q = small_split.test
    np.testing.assert_array_equal(back.predict(q).logpdf, p.predict(q).logpdf)


def test_refit_is_deterministic(small_split):
    cfg = ModelConfig.parse("gmm:edtw")
    a = make_predictor(cfg).fit(small_split.reduced_training, 5).predict(small_split.validation)
    b = make_predictor(cfg).fit(small_split.reduced_training, 5).predict(small_split.validation)
    np.testing.assert_array_equal(a.logpdf, b.logpdf)


def test_unknown_route_is_an_error(small_split, fitted):
    from dataclasses import replace
    stray = [replace(small_split.test[0], route_id="Z-North")]
    for spec in ("kde:edtw[h=2]", "lrpc[h=2]"):
        with pytest.raises(LookupError):
            fitted[spec].predict(stray)


def test_every_estimator_is_constructible():
    for e in ESTIMATORS:
        sim = "knn" if e not in ("lrpc", "forest") else None
        assert make_predictor(ModelConfig(e, sim)).config.estimator == e
