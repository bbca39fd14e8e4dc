"""Scoring, model comparison, selection sweeps and hyperparameter tuning.

NLL is reported both as a sum over trips and as a per-trip mean; every
comparison uses the mean.  Log-densities are floored at ``log(1e-12)`` and
the number of floored trips is reported with each score.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import DatasetSplit, TripRecord, as_table
from .density import LOG_PDF_FLOOR, DensityModel, log_pdf
from .estimators import (LrpcPredictor, ModelConfig, Prediction, SimilarityPredictor, fit_groups,
                         make_predictor, predict_from_batch)
from .similarity import DtwSpec, edtw_groups, knn_groups, knn_neighbors

DTW_MODES = ("five_periods", "60", "30")
K_GRID = tuple(range(2, 41))
KDE_H_GRID = (0.25, 0.5, 1.0, 2.0, 4.0)
KERNEL_GRID = ("gaussian", "epanechnikov")
LAMBDA_GRID = (1e-4, 1e-3, 1e-2, 1e-1, 1.0)
FOREST_GRID = (
    {"n_trees": 100, "max_depth": 12, "max_features": "sqrt", "min_samples_split": 5},
    {"n_trees": 100, "max_depth": 8, "max_features": "sqrt", "min_samples_split": 5},
    {"n_trees": 100, "max_depth": 16, "max_features": "sqrt", "min_samples_split": 10},
    {"n_trees": 100, "max_depth": 12, "max_features": 0.5, "min_samples_split": 5},
)

DISPLAY = {"normal": "Normal", "lognormal": "Log-Normal", "logistic": "Logistic",
           "loglogistic": "Log-Logistic", "gamma": "Gamma", "cauchy": "Cauchy", "gmm": "GMM",
           "kde": "KDE", "lrpc": "LR-PC", "forest": "Random Forest"}
SIM_DISPLAY = {"edtw": "eDTW", "knn": "kNN", None: "-"}


@dataclass(frozen=True)
class NllResult:
    total: float
    mean: float
    n: int
    floor_hits: int

    def to_dict(self) -> dict:
        return {"sum": self.total, "mean": self.mean, "n": self.n, "floor_hits": self.floor_hits}


def nll_from_logpdf(logpdf) -> NllResult:
    lp = np.asarray(logpdf, dtype=float)
    bad = ~(lp > LOG_PDF_FLOOR)          # NaN counts as a floor hit too
    lp = np.where(bad, LOG_PDF_FLOOR, lp)
    total = float(-np.sum(lp))
    n = len(lp)
    return NllResult(total, total / n if n else float("nan"), n, int(bad.sum()))


def nll(densities: Sequence[DensityModel], trips: Sequence[TripRecord]) -> NllResult:
    """-sum log p_i(t_i) with one density per trip."""
    if len(densities) != len(trips):
        raise ValueError("need exactly one density per trip")
    lp = [float(np.ravel(log_pdf(d, t.travel_time))[0]) for d, t in zip(densities, trips)]
    return nll_from_logpdf(lp)


@dataclass(frozen=True)
class MseResult:
    value: float | None
    n: int
    excluded: int
    flag: str | None = None

    def to_dict(self) -> dict:
        return {"value": self.value, "n": self.n, "excluded": self.excluded, "flag": self.flag}


def tt_mse(predictions, trips) -> MseResult:
    """Mean squared error of point predictions; undefined (None/NaN) ones are excluded."""
    y = np.array([t.travel_time for t in trips], dtype=float) if not hasattr(trips, "tt") else trips.tt
    p = np.array([np.nan if v is None else v for v in predictions], dtype=float)
    if len(p) != len(y):
        raise ValueError("need exactly one prediction per trip")
    ok = np.isfinite(p)
    if not ok.any():
        return MseResult(None, 0, int(len(p)), "mean_undefined")
    return MseResult(float(np.mean((p[ok] - y[ok]) ** 2)), int(ok.sum()), int((~ok).sum()))


def score(prediction: Prediction, trips) -> tuple[NllResult, MseResult]:
    t = as_table(trips)
    n = nll_from_logpdf(prediction.logpdf)
    if not prediction.mean_defined:
        return n, MseResult(None, 0, len(t), "mean_undefined")
    return n, tt_mse(prediction.mean, t)


def _map(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


# ---------------------------------------------------------------------------
# Model comparison
# ---------------------------------------------------------------------------

@dataclass
class ModelRow:
    config: ModelConfig
    train: NllResult | None = None
    test: NllResult | None = None
    mse: MseResult | None = None
    error: str | None = None
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"model": self.config.estimator, "similarity": self.config.similarity,
                "label": self.config.label, "hyperparameters": self.config.hyperparameters(),
                "train_nll": self.train.to_dict() if self.train else None,
                "test_nll": self.test.to_dict() if self.test else None,
                "test_mse": self.mse.to_dict() if self.mse else None,
                "error": self.error, "notes": self.notes}


@dataclass
class MetricsReport:
    rows: list[ModelRow]
    metadata: dict = field(default_factory=dict)

    @property
    def best(self) -> str | None:
        ok = [r for r in self.rows if r.test is not None]
        return min(ok, key=lambda r: r.test.mean).config.label if ok else None

    def row(self, label: str) -> ModelRow:
        for r in self.rows:
            if r.config.label == label:
                return r
        raise KeyError(label)

    def to_dict(self) -> dict:
        return {"metadata": self.metadata, "best_test_nll": self.best,
                "rows": [r.to_dict() for r in self.rows]}

    def to_text(self) -> str:
        head = ["Model", "Similarity method", "Training NLL", "Test NLL", "Test MSE"]
        body = []
        prev = None
        best = self.best
        for r in self.rows:
            name = DISPLAY[r.config.estimator]
            if r.error:
                cells = ["failed", "failed", "failed"]
            else:
                mark = "*" if r.config.label == best else ""
                mse = "undefined" if r.mse is None or r.mse.value is None else f"{r.mse.value:.2f}"
                cells = [f"{r.train.mean:.2f}" if r.train else "-", f"{r.test.mean:.2f}{mark}", mse]
            body.append(["" if name == prev else name, SIM_DISPLAY[r.config.similarity], *cells])
            prev = name
        text = _table(head, body)
        notes = ["* best test NLL (per-trip mean)"]
        if any(r.mse is not None and r.mse.flag == "mean_undefined" for r in self.rows):
            notes.append("undefined: the Cauchy law has no mean, so no point prediction exists")
        fails = [f"{r.config.label}: {r.error}" for r in self.rows if r.error]
        return text + "".join(n + "\n" for n in notes + fails)


def _table(head: list[str], body: list[list[str]]) -> str:
    widths = [max(len(head[i]), *(len(b[i]) for b in body)) if body else len(head[i]) for i in range(len(head))]
    fmt = lambda cells: "  ".join(c.ljust(w) if i < 2 else c.rjust(w)  # noqa: E731
                                  for i, (c, w) in enumerate(zip(cells, widths))).rstrip()
    rule = "-" * len(fmt(["-" * w for w in widths]))
    return "\n".join([fmt(head), rule, *(fmt(b) for b in body), rule]) + "\n"


def evaluate_config(config: ModelConfig, pool, queries, seed: int = 0, jobs: int = 1) -> tuple[Prediction, object]:
    pred = make_predictor(config, jobs).fit(pool, seed)
    return pred.predict(queries), pred


def compare_models(split: DatasetSplit, configs: Sequence[ModelConfig], seed: int = 0, jobs: int = 1,
                   with_train: bool = True) -> MetricsReport:
    """Fit every configuration on the training set (validation included) and
    score it on the training and test sets."""
    training = as_table(split.training)
    test = as_table(split.test)

    def run(cfg: ModelConfig) -> ModelRow:
        row = ModelRow(cfg)
        try:
            predictor = make_predictor(cfg, 1).fit(training, seed)
            p_test = predictor.predict(test)
            row.test, row.mse = score(p_test, test)
            row.notes = {"test_fallback": p_test.fallback, **p_test.notes}
            if with_train:
                p_train = predictor.predict(training)
                row.train = nll_from_logpdf(p_train.logpdf)
        except Exception as exc:  # recorded per row; the comparison continues
            row.error = f"{type(exc).__name__}: {exc}"
        return row

    rows = _map(run, list(configs), jobs)
    return MetricsReport(rows, {"seed": seed, "n_train": len(training), "n_test": len(test),
                                "configs": [c.to_dict() for c in configs]})


# ---------------------------------------------------------------------------
# DTW sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepCell:
    estimator: str
    setting: str
    train: NllResult | None
    validation: NllResult | None
    error: str | None = None
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"estimator": self.estimator, "setting": self.setting,
                "train_nll": self.train.to_dict() if self.train else None,
                "validation_nll": self.validation.to_dict() if self.validation else None,
                "error": self.error, "notes": self.notes}


@dataclass
class DtwSweepReport:
    modes: tuple[str, ...]
    cells: list[SweepCell]
    metadata: dict = field(default_factory=dict)

    def cell(self, estimator: str, mode: str) -> SweepCell:
        for c in self.cells:
            if c.estimator == estimator and c.setting == mode:
                return c
        raise KeyError((estimator, mode))

    @property
    def estimators(self) -> list[str]:
        return list(dict.fromkeys(c.estimator for c in self.cells))

    def overfitting(self) -> dict[str, list[str]]:
        """Per estimator, the mode transitions (coarse -> fine) where the train
        NLL improves while the validation NLL worsens."""
        out = {}
        for e in self.estimators:
            flags = []
            for a, b in zip(self.modes, self.modes[1:]):
                ca, cb = self.cell(e, a), self.cell(e, b)
                if all(x is not None for x in (ca.train, cb.train, ca.validation, cb.validation)):
                    if cb.train.mean < ca.train.mean and cb.validation.mean > ca.validation.mean:
                        flags.append(f"{a}->{b}")
            out[e] = flags
        return out

    def best_mode(self) -> dict[str, str]:
        out = {}
        for e in self.estimators:
            cand = [c for c in self.cells if c.estimator == e and c.validation is not None]
            if cand:
                out[e] = min(cand, key=lambda c: c.validation.mean).setting
        return out

    def to_dict(self) -> dict:
        return {"metadata": self.metadata, "modes": list(self.modes), "cells": [c.to_dict() for c in self.cells],
                "overfitting": self.overfitting(), "best_mode": self.best_mode()}

    def to_text(self) -> str:
        label = {"five_periods": "5 periods"}
        head = ["Model"] + [f"{label.get(m, m + ' minutes')} {p}" for m in self.modes for p in ("Train", "Validation")]
        body = []
        for e in self.estimators:
            cells = [DISPLAY.get(e, e)]
            for m in self.modes:
                c = self.cell(e, m)
                cells += [f"{c.train.mean:.2f}" if c.train else "failed",
                          f"{c.validation.mean:.2f}" if c.validation else "failed"]
            body.append(cells)
        over = self.overfitting()
        tail = "".join(f"overfitting {e}: {', '.join(v)}\n" for e, v in over.items() if v)
        return _table_numeric(head, body) + tail


def _table_numeric(head, body) -> str:
    widths = [max(len(head[i]), *(len(b[i]) for b in body)) if body else len(head[i]) for i in range(len(head))]
    fmt = lambda cells: "  ".join(c.ljust(w) if i == 0 else c.rjust(w)  # noqa: E731
                                  for i, (c, w) in enumerate(zip(cells, widths))).rstrip()
    rule = "-" * len(fmt(["-" * w for w in widths]))
    return "\n".join([fmt(head), rule, *(fmt(b) for b in body), rule]) + "\n"


def sweep_dtw(split: DatasetSplit, estimators: Sequence[str], modes: Sequence[str] = DTW_MODES,
              seed: int = 0, base: dict | None = None, jobs: int = 1) -> DtwSweepReport:
    """Fit every estimator on the reduced training set with eDTW selection at
    each window setting; score it on the reduced training and validation sets."""
    train = as_table(split.reduced_training)
    val = as_table(split.validation)
    base = dict(base or {})

    def run(item):
        est, mode = item
        try:
            cfg = ModelConfig(est, "edtw", dtw=mode, **base.get(est, {}))
            spec = DtwSpec.parse(mode)
            g_tr = edtw_groups(train, train, spec)
            batch = fit_groups(cfg, g_tr, train.tt, seed)
            p_tr = predict_from_batch(cfg, batch, g_tr, train.tt)
            g_va = edtw_groups(val, train, spec)
            # validation trips reuse the training groups of their window
            key = {tuple(m.tolist()): i for i, m in enumerate(g_tr.members)}
            rows = np.array([key[tuple(g_va.members[g].tolist())] for g in g_va.query_group])
            p_va = batch.logpdf(rows, val.tt)
            return SweepCell(est, mode, nll_from_logpdf(p_tr.logpdf), nll_from_logpdf(p_va),
                             notes={"n_windows": len(g_tr.members), "validation_fallback": int(g_va.fallback.sum()),
                                    **p_tr.notes})
        except Exception as exc:
            return SweepCell(est, mode, None, None, f"{type(exc).__name__}: {exc}")

    items = [(e, m) for e in estimators for m in modes]
    cells = _map(run, items, jobs)
    return DtwSweepReport(tuple(modes), cells, {"seed": seed, "n_train": len(train), "n_validation": len(val)})


# ---------------------------------------------------------------------------
# k sweep
# ---------------------------------------------------------------------------

def plateau_k(ks: Sequence[int], values: Sequence[float], tol: float = 0.01) -> int:
    """Smallest k whose value is within ``tol`` of the minimum."""
    v = np.asarray(values, float)
    ok = np.isfinite(v)
    if not ok.any():
        raise ValueError("no finite values")
    best = np.nanmin(v[ok])
    for k, x in zip(ks, v):
        if np.isfinite(x) and x <= best + tol:
            return int(k)
    raise AssertionError("unreachable")


def changepoint(ks: Sequence[int], values: Sequence[float]) -> int:
    """Knee of a decreasing-then-flat curve: the breakpoint of the best
    two-segment fit (free line, then constant) in least squares."""
    x = np.asarray(ks, float)
    y = np.asarray(values, float)
    best, arg = math.inf, int(x[0])
    for j in range(2, len(x) - 1):
        a = np.polyfit(x[: j + 1], y[: j + 1], 1)
        left = y[: j + 1] - np.polyval(a, x[: j + 1])
        level = np.mean(y[j:])
        right = y[j:] - level
        sse = float(np.sum(left ** 2) + np.sum(right ** 2))
        if sse < best:
            best, arg = sse, int(x[j])
    return arg


@dataclass
class KSweepReport:
    ks: tuple[int, ...]
    series: dict[str, list[float | None]]
    errors: dict[str, str]
    metadata: dict = field(default_factory=dict)
    tol: float = 0.01

    def selected_k(self) -> dict[str, int]:
        return {e: plateau_k(self.ks, [np.nan if x is None else x for x in v], self.tol)
                for e, v in self.series.items() if any(x is not None for x in v)}

    def best_k(self) -> dict[str, int]:
        return {e: int(self.ks[int(np.nanargmin([np.nan if x is None else x for x in v]))])
                for e, v in self.series.items() if any(x is not None for x in v)}

    def knee(self) -> dict[str, int]:
        out = {}
        for e, v in self.series.items():
            if all(x is not None for x in v) and len(v) >= 4:
                out[e] = changepoint(self.ks, v)
        return out

    def value(self, estimator: str, k: int) -> float | None:
        return self.series[estimator][self.ks.index(k)]

    def to_dict(self) -> dict:
        return {"metadata": self.metadata, "k": list(self.ks), "validation_nll": self.series,
                "selected_k": self.selected_k(), "best_k": self.best_k(), "knee": self.knee(),
                "plateau_tolerance": self.tol, "errors": self.errors}

    def to_csv(self) -> str:
        lines = ["estimator,k,validation_nll"]
        for e, v in self.series.items():
            lines += [f"{e},{k},{'' if x is None else repr(float(x))}" for k, x in zip(self.ks, v)]
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        sel, best = self.selected_k(), self.best_k()
        head = ["Model", "k=2", "selected k", "NLL at selected k", "best k", "best NLL"]
        body = []
        for e, v in self.series.items():
            if e not in sel:
                body.append([DISPLAY.get(e, e), "failed", "-", "-", "-", "-"])
                continue
            body.append([DISPLAY.get(e, e), f"{self.value(e, self.ks[0]):.3f}", str(sel[e]),
                         f"{self.value(e, sel[e]):.3f}", str(best[e]), f"{self.value(e, best[e]):.3f}"])
        return _table_numeric(head, body)


def sweep_k(split: DatasetSplit, estimators: Sequence[str], k_grid: Sequence[int] = K_GRID, seed: int = 0,
            base: dict | None = None, jobs: int = 1, tol: float = 0.01) -> KSweepReport:
    """Validation NLL of kNN selection for each estimator and k.

    Neighbours are ranked once at the largest k; every smaller k takes the
    prefix of that ordering.
    """
    ks = tuple(sorted(set(int(k) for k in k_grid)))
    if not ks or ks[0] < 1:
        raise ValueError("k grid must hold positive integers")
    train = as_table(split.reduced_training)
    val = as_table(split.validation)
    base = dict(base or {})
    idx, count = knn_neighbors(val, train, ks[-1])
    series: dict[str, list[float | None]] = {}
    errors: dict[str, str] = {}

    def run(est):
        vals: list[float | None] = []
        err = None
        for k in ks:
            try:
                cfg = ModelConfig(est, "knn", k=k, **base.get(est, {}))
                g = knn_groups(idx, count, k)
                batch = fit_groups(cfg, g, train.tt, seed)
                vals.append(nll_from_logpdf(batch.logpdf(g.query_group, val.tt)).mean)
            except Exception as exc:
                vals.append(None)
                err = f"k={k}: {type(exc).__name__}: {exc}"
        return vals, err

    for est, (vals, err) in zip(estimators, _map(run, list(estimators), jobs)):
        series[est] = vals
        if err:
            errors[est] = err
    return KSweepReport(ks, series, errors, {"seed": seed, "n_train": len(train), "n_validation": len(val)}, tol)


# ---------------------------------------------------------------------------
# Hyperparameter tuning on the validation set
# ---------------------------------------------------------------------------

@dataclass
class TuningResult:
    best: ModelConfig
    table: list[tuple[dict, float | None]]

    def to_dict(self) -> dict:
        return {"best": self.best.to_dict(), "grid": [{"params": p, "validation_nll": v} for p, v in self.table]}


def tune(config: ModelConfig, split: DatasetSplit, seed: int = 0, h_grid=KDE_H_GRID, kernels=KERNEL_GRID,
         lambdas=LAMBDA_GRID, forest_grid=FOREST_GRID) -> TuningResult:
    """Grid search on validation NLL (fitted on the reduced training set).

    KDE tunes (kernel, h); LR-PC tunes λ and the smoothing (kernel, h), fitting
    once per λ; the forest tunes over ``forest_grid``.  Other estimators have
    nothing to tune here and come back unchanged.
    """
    train = as_table(split.reduced_training)
    val = as_table(split.validation)
    table: list[tuple[dict, float | None]] = []

    def val_nll(pred: Prediction) -> float:
        return nll_from_logpdf(pred.logpdf).mean

    if config.estimator == "kde":
        sim = SimilarityPredictor(config).fit(train, seed)
        groups = sim.groups(val)
        for kernel in kernels:
            for h in h_grid:
                cfg = config.with_params(kernel=kernel, h=float(h))
                batch = fit_groups(cfg, groups, train.tt, seed)
                table.append(({"kernel": kernel, "h": float(h)}, val_nll(predict_from_batch(cfg, batch, groups, val.tt))))
    elif config.estimator == "lrpc":
        for lam in lambdas:
            fitted = LrpcPredictor(config.with_params(lam=float(lam))).fit(train, seed)
            for kernel in kernels:
                for h in h_grid:
                    table.append(({"lam": float(lam), "kernel": kernel, "h": float(h)},
                                  val_nll(fitted.with_smoothing(kernel, float(h)).predict(val))))
    elif config.estimator == "forest":
        for hp in forest_grid:
            cfg = config.with_params(forest=dict(hp))
            table.append((dict(hp), val_nll(make_predictor(cfg).fit(train, seed).predict(val))))
    else:
        return TuningResult(config, [])
    params, _ = min(table, key=lambda pv: (math.inf if pv[1] is None else pv[1]))
    best = config.with_params(forest=params) if config.estimator == "forest" else config.with_params(**params)
    return TuningResult(best, table)


# ---------------------------------------------------------------------------
# Oracle dominance
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DominanceResult:
    mean_gap: float      # mean over seeds of (model NLL - oracle NLL), per-trip scale
    stderr: float
    n_seeds: int

    @property
    def beats_oracle(self) -> bool:
        """True when the model is better than the oracle by more than 3 sigma."""
        return self.mean_gap < -3.0 * self.stderr

    def to_dict(self) -> dict:
        return {"mean_gap": self.mean_gap, "stderr": self.stderr, "n_seeds": self.n_seeds,
                "beats_oracle": self.beats_oracle}


def oracle_dominance(model_nll: Iterable[float], oracle_nll: Iterable[float]) -> DominanceResult:
    d = np.asarray(list(model_nll), float) - np.asarray(list(oracle_nll), float)
    if len(d) < 2:
        raise ValueError("need at least two seed replicates")
    return DominanceResult(float(d.mean()), float(d.std(ddof=1) / math.sqrt(len(d))), len(d))
