"""Model configurations and the predictors behind them.

A configuration names an estimator (a parametric family, ``gmm``, ``kde``,
``lrpc`` or ``forest``) and, for the first three kinds, a similarity method.
Every predictor is fitted on a pool of training trips and returns, for a
table of query trips, the raw log-density of each observed travel time and
the predicted mean.
"""

from __future__ import annotations

import datetime as dt
import math
import re
from dataclasses import dataclass, field, replace

import numpy as np

from ._util import derive_seed
from .baseline import DEFAULT_HYPERPARAMS, ForestModel, fit_forest, forest_schema
from .data import TripRecord, TripTable, as_table, encode_table
from .density import (FAMILIES, KERNELS, VAR_FLOOR, DensityModel, Kde, Parametric, family_logpdf,
                      fit_gmm_batch, fit_kde, fit_parametric_batch, kde_batch)
from .lrpc import MIN_ROUTE_TRIPS, LrpcModel, fit_lrpc
from .similarity import DtwSpec, Groups, edtw_groups, knn_groups, knn_neighbors

SIMILARITY_ESTIMATORS = FAMILIES + ("gmm", "kde")
ESTIMATORS = SIMILARITY_ESTIMATORS + ("lrpc", "forest")
SIMILARITIES = ("edtw", "knn")


@dataclass(frozen=True)
class ModelConfig:
    estimator: str
    similarity: str | None = None
    k: int = 13
    dtw: str = "60"
    kernel: str = "gaussian"
    h: float = 1.0
    n_components: int = 3
    lam: float = 1e-3
    forest: tuple[tuple[str, object], ...] = tuple(DEFAULT_HYPERPARAMS.items())

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.estimator in SIMILARITY_ESTIMATORS:
            if self.similarity not in SIMILARITIES:
                raise ValueError(f"{self.estimator} needs a similarity method (edtw or knn)")
        elif self.similarity is not None:
            raise ValueError(f"{self.estimator} does not use a similarity method")
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.k < 1 or not self.h > 0 or self.n_components < 1 or self.lam < 0:
            raise ValueError("invalid hyperparameter value")
        DtwSpec.parse(self.dtw)

    @property
    def label(self) -> str:
        return self.estimator if self.similarity is None else f"{self.estimator}:{self.similarity}"

    @property
    def forest_params(self) -> dict:
        return dict(self.forest)

    def hyperparameters(self) -> dict:
        """Only the settings that affect this configuration."""
        e = self.estimator
        out: dict = {}
        if self.similarity == "knn":
            out["k"] = self.k
        if self.similarity == "edtw":
            out["dtw"] = self.dtw
        if e in ("kde", "lrpc"):
            out.update(kernel=self.kernel, h=self.h)
        if e == "gmm":
            out["n_components"] = self.n_components
        if e == "lrpc":
            out["lam"] = self.lam
        if e == "forest":
            out.update(self.forest_params)
        return out

    def with_params(self, **kw) -> "ModelConfig":
        if "forest" in kw and isinstance(kw["forest"], dict):
            kw["forest"] = tuple({**self.forest_params, **kw["forest"]}.items())
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {"estimator": self.estimator, "similarity": self.similarity, **self.hyperparameters()}

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        d = dict(d)
        base = cls(d.pop("estimator"), d.pop("similarity", None))
        forest = {k: _forest_value(k, d.pop(k)) for k in list(d) if k in DEFAULT_HYPERPARAMS}
        cfg = base.with_params(**_coerce(d))
        return cfg.with_params(forest=forest) if forest else cfg

    @classmethod
    def parse(cls, text: str) -> "ModelConfig":
        """``estimator[:similarity][key=value;key=value]``, e.g. ``kde:knn[h=2]``."""
        m = re.fullmatch(r"\s*([a-z]+)(?::([a-z]+))?\s*(?:\[(.*)\])?\s*", text)
        if not m:
            raise ValueError(f"cannot parse model specification {text!r}")
        est, sim, opts = m.groups()
        kw = {}
        for item in filter(None, (opts or "").split(";")):
            key, _, value = item.partition("=")
            kw[key.strip()] = value.strip()
        return cls.from_dict({"estimator": est, "similarity": sim, **kw})


def _coerce(d: dict) -> dict:
    types = {"k": int, "dtw": str, "kernel": str, "h": float, "n_components": int, "lam": float}
    out = {}
    for key, value in d.items():
        if key not in types:
            raise ValueError(f"unknown hyperparameter {key!r}")
        out[key] = types[key](value)
    return out


def _forest_value(key: str, value):
    if not isinstance(value, str):
        return value
    if value.lower() == "none":
        return None
    if key == "max_features":
        try:
            f = float(value)
        except ValueError:
            return value
        return int(f) if f.is_integer() and f >= 1 else f
    return int(value)


def split_model_list(text: str) -> list[ModelConfig]:
    """Comma-separated specifications; commas inside brackets are kept."""
    parts, depth, cur = [], 0, ""
    for ch in text:
        depth += ch == "["
        depth -= ch == "]"
        if ch == "," and depth == 0:
            parts.append(cur)
            cur = ""
        else:
            cur += ch
    parts.append(cur)
    return [ModelConfig.parse(p) for p in parts if p.strip()]


@dataclass
class Prediction:
    logpdf: np.ndarray       # raw log-density of each query's observed travel time
    mean: np.ndarray         # NaN where the mean is undefined
    mean_defined: bool = True
    fallback: int = 0        # queries served by a fallback selection or model
    notes: dict = field(default_factory=dict)


class Predictor:
    config: ModelConfig

    def fit(self, pool, seed: int = 0) -> "Predictor":
        raise NotImplementedError

    def predict(self, queries) -> Prediction:
        raise NotImplementedError

    def densities(self, queries) -> list[DensityModel]:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# Similarity-based estimators
# ---------------------------------------------------------------------------

def fit_groups(config: ModelConfig, groups: Groups, pool_tt: np.ndarray, seed: int):
    """Fit one density per group; returns a batch object with logpdf/mean/model."""
    X, mask = groups.padded(pool_tt)
    if config.estimator == "kde":
        return kde_batch(X, mask, config.kernel, config.h)
    if config.estimator == "gmm":
        rng = np.random.default_rng(derive_seed(seed, "gmm", config.label))
        return fit_gmm_batch(X, mask, config.n_components, rng)
    return fit_parametric_batch(X, mask, config.estimator)


class SimilarityPredictor(Predictor):
    def __init__(self, config: ModelConfig):
        self.config = config
        self.pool: TripTable | None = None
        self.seed = 0

    def fit(self, pool, seed: int = 0):
        self.pool = as_table(pool)
        if len(self.pool) == 0:
            raise ValueError("empty training pool")
        self.seed = seed
        return self

    def groups(self, queries: TripTable) -> Groups:
        if self.config.similarity == "edtw":
            return edtw_groups(queries, self.pool, DtwSpec.parse(self.config.dtw))
        idx, count = knn_neighbors(queries, self.pool, self.config.k)
        g = knn_groups(idx, count, self.config.k)
        g.fallback = count < self.config.k
        return g

    def _fit(self, queries):
        queries = as_table(queries)
        groups = self.groups(queries)
        if np.any(groups.query_group < 0):
            missing = sorted(set(queries.route_ids[groups.query_group < 0].tolist()))
            raise LookupError(f"no training trips for routes {missing}")
        return queries, groups, fit_groups(self.config, groups, self.pool.tt, self.seed)

    def predict(self, queries) -> Prediction:
        queries, groups, batch = self._fit(queries)
        return predict_from_batch(self.config, batch, groups, queries.tt)

    def densities(self, queries) -> list[DensityModel]:
        _, groups, batch = self._fit(queries)
        cache: dict[int, DensityModel] = {}
        out = []
        for g in groups.query_group.tolist():
            if g not in cache:
                cache[g] = batch.model(g)
            out.append(cache[g])
        return out


def predict_from_batch(config: ModelConfig, batch, groups: Groups, tt: np.ndarray) -> Prediction:
    rows = groups.query_group
    lp = batch.logpdf(rows, tt)
    mean = np.asarray(batch.mean(rows), dtype=float)
    notes = {"n_groups": len(groups.members)}
    if config.estimator == "gmm":
        notes["collapsed_groups"] = int(np.sum(batch.collapsed))
    elif config.estimator in FAMILIES:
        notes["degenerate_groups"] = int(np.sum(batch.degenerate))
    return Prediction(lp, mean, config.estimator != "cauchy", int(np.sum(groups.fallback)), notes)


# ---------------------------------------------------------------------------
# LR-PC
# ---------------------------------------------------------------------------

class LrpcPredictor(Predictor):
    """One LR-PC model per route; routes too small to fit fall back to a KDE."""

    def __init__(self, config: ModelConfig, epochs: int = 100):
        self.config = config
        self.epochs = epochs
        self.models: dict[str, LrpcModel] = {}
        self.fallbacks: dict[str, Kde] = {}

    def fit(self, pool, seed: int = 0):
        pool = as_table(pool)
        if len(pool) == 0:
            raise ValueError("empty training pool")
        self.models, self.fallbacks = {}, {}
        for route, idx in pool.route_groups().items():
            trips = [pool.trips[i] for i in idx]
            if len(trips) < MIN_ROUTE_TRIPS:
                self.fallbacks[route] = fit_kde(pool.tt[idx], self.config.kernel, self.config.h)
                continue
            self.models[route] = fit_lrpc(trips, self.config.lam, derive_seed(seed, "lrpc", route),
                                          self.epochs, kernel=self.config.kernel, h=self.config.h)
        return self

    def with_smoothing(self, kernel: str, h: float) -> "LrpcPredictor":
        out = LrpcPredictor(self.config.with_params(kernel=kernel, h=h), self.epochs)
        out.models = {r: m.with_smoothing(kernel, h) for r, m in self.models.items()}
        out.fallbacks = {r: Kde(k.points, kernel, h) for r, k in self.fallbacks.items()}
        return out

    def predict(self, queries) -> Prediction:
        q = as_table(queries)
        lp = np.empty(len(q))
        mean = np.empty(len(q))
        n_fb = 0
        for route, idx in q.route_groups().items():
            if route in self.models:
                m = self.models[route]
                lp[idx] = m.logpdf(q.dep[idx], q.tt[idx])
                mean[idx] = m.means(q.dep[idx])
            elif route in self.fallbacks:
                k = self.fallbacks[route]
                lp[idx] = k._raw_logpdf(q.tt[idx])
                mean[idx] = k.mean()
                n_fb += len(idx)
            else:
                raise LookupError(f"no training trips for route {route}")
        return Prediction(lp, mean, True, n_fb, {"skipped_routes": sorted(self.fallbacks)})

    def densities(self, queries) -> list[DensityModel]:
        out = []
        for t in as_table(queries).trips:
            if t.route_id in self.models:
                out.append(self.models[t.route_id].density(t.scheduled_departure))
            elif t.route_id in self.fallbacks:
                out.append(self.fallbacks[t.route_id])
            else:
                raise LookupError(f"no training trips for route {t.route_id}")
        return out


# ---------------------------------------------------------------------------
# Random forest as a Gaussian
# ---------------------------------------------------------------------------

class ForestPredictor(Predictor):
    def __init__(self, config: ModelConfig, jobs: int = 1):
        self.config = config
        self.jobs = jobs
        self.model: ForestModel | None = None

    def fit(self, pool, seed: int = 0):
        pool = as_table(pool)
        if len(pool) < 2:
            raise ValueError("forest needs at least 2 training trips")
        schema = forest_schema(pool.trips)
        self.model = fit_forest(encode_table(pool, schema), pool.tt, self.config.forest_params,
                                derive_seed(seed, "forest"), self.jobs, schema)
        return self

    def _means(self, q: TripTable) -> np.ndarray:
        return self.model.predict(encode_table(q, self.model.schema))

    def predict(self, queries) -> Prediction:
        q = as_table(queries)
        mu = self._means(q)
        sd = math.sqrt(max(self.model.mse, VAR_FLOOR))
        return Prediction(family_logpdf("normal", q.tt, mu, sd), mu, True, 0, {"mse": self.model.mse})

    def densities(self, queries) -> list[DensityModel]:
        q = as_table(queries)
        sd = math.sqrt(max(self.model.mse, VAR_FLOOR))
        return [Parametric("normal", (float(m), sd)) for m in self._means(q)]


def _trip_row(t: TripRecord) -> list:
    return [t.trip_id, t.route_id, t.date.isoformat(), t.day_of_week, t.week_number, t.scheduled_departure,
            t.actual_departure, t.actual_arrival, t.n_stops, t.distance_km, t.region_type]


def _row_trip(r) -> TripRecord:
    return TripRecord(r[0], r[1], dt.date.fromisoformat(r[2]), r[3], int(r[4]), float(r[5]), float(r[6]),
                      float(r[7]), int(r[8]), float(r[9]), r[10])


def predictor_to_dict(p: Predictor) -> dict:
    """Self-contained JSON form of a fitted predictor."""
    out = {"config": p.config.to_dict()}
    if isinstance(p, SimilarityPredictor):
        out.update(kind="similarity", seed=p.seed, pool=[_trip_row(t) for t in p.pool.trips])
    elif isinstance(p, LrpcPredictor):
        out.update(kind="lrpc", epochs=p.epochs, routes={r: m.to_dict() for r, m in sorted(p.models.items())},
                   fallbacks={r: k.to_dict() for r, k in sorted(p.fallbacks.items())})
    elif isinstance(p, ForestPredictor):
        out.update(kind="forest", forest=p.model.to_dict())
    else:
        raise TypeError(f"cannot serialize {type(p).__name__}")
    return out


def predictor_from_dict(d) -> Predictor:
    from .density import from_dict as density_from_dict

    config = ModelConfig.from_dict(d["config"])
    kind = d.get("kind")
    if kind == "similarity":
        return SimilarityPredictor(config).fit([_row_trip(r) for r in d["pool"]], int(d["seed"]))
    if kind == "lrpc":
        p = LrpcPredictor(config, int(d.get("epochs", 100)))
        p.models = {r: LrpcModel.from_dict(m) for r, m in d["routes"].items()}
        p.fallbacks = {r: density_from_dict(k) for r, k in d["fallbacks"].items()}
        return p
    if kind == "forest":
        p = ForestPredictor(config)
        p.model = ForestModel.from_dict(d["forest"])
        return p
    raise ValueError(f"unknown model kind {kind!r}")


def make_predictor(config: ModelConfig, jobs: int = 1) -> Predictor:
    if config.estimator == "lrpc":
        return LrpcPredictor(config)
    if config.estimator == "forest":
        return ForestPredictor(config, jobs)
    return SimilarityPredictor(config)


__all__ = [
    "ESTIMATORS", "ForestPredictor", "LrpcPredictor", "ModelConfig", "Prediction", "Predictor",
    "SIMILARITIES", "SIMILARITY_ESTIMATORS", "SimilarityPredictor", "fit_groups", "make_predictor",
    "predict_from_batch", "predictor_from_dict", "predictor_to_dict", "split_model_list",
]
