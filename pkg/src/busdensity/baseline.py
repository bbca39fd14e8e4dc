"""Bagged regression trees: point predictor, Gaussian baseline, permutation importance.

Trees are grown with scikit-learn and exported to plain node arrays, so
prediction, serialization and importance scoring only depend on numpy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import FeatureSchema, TripRecord, as_table, encode_table
from .density import VAR_FLOOR, Parametric

FOREST_FEATURES = (
    ("n_stops", "raw"),
    ("distance_km", "raw"),
    ("scheduled_departure", "raw"),
    ("route_id", "onehot"),
    ("week_number", "raw"),
    ("day_of_week", "onehot"),
)
REGION_FEATURE = ("region_type", "onehot")
DEFAULT_HYPERPARAMS = {"n_trees": 100, "max_depth": 12, "max_features": "sqrt", "min_samples_split": 5}


@dataclass(frozen=True)
class Tree:
    left: np.ndarray       # -1 marks a leaf
    right: np.ndarray
    feature: np.ndarray
    threshold: np.ndarray  # go left when x[feature] <= threshold
    value: np.ndarray      # mean target of the node's training samples

    @property
    def depth(self) -> int:
        d = np.zeros(len(self.left), dtype=int)
        for i in range(len(self.left)):
            if self.left[i] >= 0:
                d[self.left[i]] = d[self.right[i]] = d[i] + 1
        return int(d.max())

    def predict(self, X32: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X32), dtype=np.int64)
        rows = np.arange(len(X32))
        while True:
            inner = self.left[node] >= 0
            if not inner.any():
                return self.value[node]
            f = self.feature[node]
            go_left = X32[rows, np.maximum(f, 0)] <= self.threshold[node]
            nxt = np.where(go_left, self.left[node], self.right[node])
            node = np.where(inner, nxt, node)

    def to_dict(self) -> dict:
        return {"left": self.left.tolist(), "right": self.right.tolist(), "feature": self.feature.tolist(),
                "threshold": self.threshold.tolist(), "value": self.value.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Tree":
        return cls(np.asarray(d["left"], dtype=np.int64), np.asarray(d["right"], dtype=np.int64),
                   np.asarray(d["feature"], dtype=np.int64), np.asarray(d["threshold"], dtype=float),
                   np.asarray(d["value"], dtype=float))


@dataclass(frozen=True)
class ForestModel:
    trees: tuple[Tree, ...]
    hyperparams: dict
    mse: float             # out-of-bag MSE, the constant variance of the Gaussian view
    seed: int
    n_features: int
    schema: FeatureSchema | None = None
    mse_source: str = "oob"
    flags: tuple[str, ...] = field(default=())

    def predict(self, X) -> np.ndarray:
        X32 = np.asarray(X, dtype=np.float32)
        if X32.ndim != 2 or X32.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} feature columns")
        acc = np.zeros(len(X32))
        for tree in self.trees:
            acc += tree.predict(X32)
        return acc / len(self.trees)

    @property
    def variance(self) -> float:
        return max(self.mse, VAR_FLOOR)

    def to_dict(self) -> dict:
        return {"kind": "forest", "hyperparams": dict(self.hyperparams), "mse": self.mse,
                "mse_source": self.mse_source, "seed": self.seed, "n_features": self.n_features,
                "schema": self.schema.to_dict() if self.schema else None,
                "trees": [t.to_dict() for t in self.trees], "flags": list(self.flags)}

    @classmethod
    def from_dict(cls, d) -> "ForestModel":
        schema = FeatureSchema.from_dict(d["schema"]) if d.get("schema") else None
        return cls(tuple(Tree.from_dict(t) for t in d["trees"]), dict(d["hyperparams"]), float(d["mse"]),
                   int(d["seed"]), int(d["n_features"]), schema, d.get("mse_source", "oob"),
                   tuple(d.get("flags", ())))


def forest_schema(trips: Sequence[TripRecord], include_region: bool = False) -> FeatureSchema:
    features = FOREST_FEATURES + ((REGION_FEATURE,) if include_region else ())
    return FeatureSchema.fit(trips, features)


def fit_forest(X, y, hyperparams: Mapping | None = None, seed: int = 0, jobs: int = 1,
               schema: FeatureSchema | None = None) -> ForestModel:
    from sklearn.ensemble import RandomForestRegressor

    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(y) < 2:
        raise ValueError("forest needs at least 2 training rows")
    hp = {**DEFAULT_HYPERPARAMS, **(hyperparams or {})}
    rf = RandomForestRegressor(
        n_estimators=int(hp["n_trees"]), max_depth=hp["max_depth"], max_features=hp["max_features"],
        min_samples_split=int(hp["min_samples_split"]), bootstrap=True,
        random_state=seed % 2**32, n_jobs=jobs)
    rf.fit(X, y)
    trees = []
    for est in rf.estimators_:
        t = est.tree_
        trees.append(Tree(t.children_left.astype(np.int64), t.children_right.astype(np.int64),
                          t.feature.astype(np.int64), t.threshold.astype(float), t.value.reshape(-1).astype(float)))
    # out-of-bag predictions recomputed from the bootstrap draws: sklearn fills
    # never-out-of-bag rows with 0, which would poison the MSE
    X32 = X.astype(np.float32)
    acc = np.zeros(len(y))
    hits = np.zeros(len(y))
    for tree, drawn in zip(trees, rf.estimators_samples_):
        out = np.ones(len(y), dtype=bool)
        out[drawn] = False
        acc[out] += tree.predict(X32[out])
        hits[out] += 1
    seen = hits > 0
    flags: tuple[str, ...] = ()
    if seen.any():
        mse = float(np.mean((acc[seen] / hits[seen] - y[seen]) ** 2))
        source = "oob"
    else:
        model = ForestModel(tuple(trees), hp, 0.0, seed, X.shape[1], schema)
        mse = float(np.mean((model.predict(X) - y) ** 2))
        source = "in_sample"
        flags = ("no_oob_rows",)
    return ForestModel(tuple(trees), hp, mse, seed, X.shape[1], schema, source, flags)


def fit_forest_trips(trips: Sequence[TripRecord], hyperparams: Mapping | None = None, seed: int = 0,
                     jobs: int = 1, include_region: bool = False) -> ForestModel:
    if not trips:
        raise ValueError("empty training set")
    table = as_table(trips)
    schema = forest_schema(table.trips, include_region)
    return fit_forest(encode_table(table, schema), table.tt, hyperparams, seed, jobs, schema)


def predict_mean(forest: ForestModel, x) -> np.ndarray | float:
    """Average of the trees' leaf means; ``x`` may be one row or a matrix."""
    X = np.asarray(x, dtype=float)
    if X.ndim == 1:
        return float(forest.predict(X[None, :])[0])
    return forest.predict(X)


def forest_as_gaussian(forest: ForestModel, x) -> Parametric:
    return Parametric("normal", (float(predict_mean(forest, x)), math.sqrt(forest.variance)))


def _mse(forest, X, y):
    return float(np.mean((forest.predict(X) - y) ** 2))


def permutation_importance(forest: ForestModel, X, y, columns, n_shuffles: int = 10, seed: int = 0) -> float:
    """Mean increase of the MSE when ``columns`` are permuted jointly over rows.

    Positive means the feature matters.  ``columns`` is an index or a list of
    indices (a one-hot block moves together).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(y) == 0:
        raise ValueError("empty dataset")
    cols = [int(columns)] if np.isscalar(columns) else [int(c) for c in columns]
    if any(c < 0 or c >= X.shape[1] for c in cols):
        raise ValueError("feature column out of range")
    base_pred = forest.predict(X)
    base = float(np.mean((base_pred - y) ** 2))
    rng = np.random.default_rng(seed)
    diffs = []
    for _ in range(n_shuffles):
        perm = rng.permutation(len(y))
        Xp = X.copy()
        Xp[:, cols] = X[perm][:, cols]
        if np.array_equal(Xp[:, cols], X[:, cols]):
            diffs.append(0.0)
            continue
        diffs.append(_mse(forest, Xp, y) - base)
    return float(np.mean(diffs))


@dataclass(frozen=True)
class ImportanceRow:
    feature: str
    absolute: float
    relative: float   # percent of the summed positive importances

    def to_dict(self) -> dict:
        return {"feature": self.feature, "absolute": self.absolute, "relative": self.relative}


def importance_table(forest: ForestModel, X, y, groups: Mapping[str, Sequence[int]],
                     n_shuffles: int = 10, seed: int = 0) -> list[ImportanceRow]:
    """Ranked importances; each group gets its own derived shuffle stream."""
    from ._util import derive_seed

    scores = {name: permutation_importance(forest, X, y, cols, n_shuffles, derive_seed(seed, "perm", name))
              for name, cols in groups.items()}
    shares = relative_shares(scores)
    rows = [ImportanceRow(n, s, shares[n]) for n, s in scores.items()]
    return sorted(rows, key=lambda r: (-r.absolute, r.feature))


def relative_shares(scores: Mapping[str, float]) -> dict[str, float]:
    """Percent of the summed positive importances (negative scores keep their sign)."""
    total = sum(max(s, 0.0) for s in scores.values())
    return {n: 100.0 * s / total if total > 0 else 0.0 for n, s in scores.items()}


def format_importance(rows: Sequence[ImportanceRow]) -> str:
    w = max([len("Feature")] + [len(r.feature) for r in rows])
    lines = [f"{'Feature':<{w}}  {'Absolute':>10}  {'Relative (%)':>12}"]
    lines += [f"{r.feature:<{w}}  {r.absolute:>10.2f}  {r.relative:>12.2f}" for r in rows]
    return "\n".join(lines) + "\n"
