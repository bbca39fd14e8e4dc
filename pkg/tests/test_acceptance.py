"""Acceptance criteria 1-11, each at its stated tolerance.

Every test records one PASS/FAIL line (printed in the terminal summary)
before asserting, so a failing criterion still reports its measured values.
"""

import datetime as dt
import itertools
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from busdensity._util import derive_seed
from busdensity.baseline import fit_forest, forest_as_gaussian, permutation_importance
from busdensity.cli import EXIT_OK, run
from busdensity.data import SplitConfig, as_table, chronological_split, mad_filter
from busdensity.delay import (VehicleSchedule, expected_delay_single_predecessor, expected_secondary_delay_mc,
                              realized_departures, realized_secondary_delays)
from busdensity.density import (FAMILIES, KERNELS, Kde, fit_gmm, fit_kde, fit_parametric, fit_parametric_batch,
                                integrate)
from busdensity.estimators import ModelConfig, split_model_list
from busdensity.evaluation import (DISPLAY, KDE_H_GRID, compare_models, nll_from_logpdf, oracle_dominance, sweep_dtw,
                                   sweep_k, tune)
from busdensity.lrpc import ClassGrid, LrpcModel, fit_lrpc, predict_pmf, smooth_pmf, softmax
from busdensity.synth import Oracle, SynthConfig, generate

import conftest
from conftest import FIXTURES

PAPERLIKE = FIXTURES / "paperlike.json"
SPARSE = FIXTURES / "sparse_evening.json"
TRAIN_END = dt.date(2017, 10, 6)       # paperlike: weeks 35-40 train, week 41 gap, week 42 test
SPARSE_TRAIN_END = dt.date(2017, 9, 22)
SIM_ESTIMATORS = ("cauchy", "gamma", "normal", "lognormal", "logistic", "loglogistic", "gmm", "kde")


def record(n: int, ok: bool, detail: str) -> None:
    conftest.ACCEPTANCE_LINES[n] = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(conftest.ACCEPTANCE_LINES[n])


def paper_split(config: SynthConfig, seed: int, train_end=TRAIN_END):
    kept = mad_filter(generate(config, seed)).kept
    return chronological_split(kept, SplitConfig(train_end=train_end))


@pytest.fixture(scope="module")
def paperlike():
    return SynthConfig.load(PAPERLIKE)


@pytest.fixture(scope="module")
def paper7(paperlike):
    return paper_split(paperlike, 7)


# ---------------------------------------------------------------------------
# 1. normalization
# ---------------------------------------------------------------------------

def test_c01_normalization():
    t0 = time.perf_counter()
    rng = np.random.default_rng(derive_seed(1, "normalization"))
    x = rng.gamma(9.0, 4.0, 400)
    models = {f: fit_parametric(x, f) for f in FAMILIES}
    models.update({f"gmm K={k}": fit_gmm(x, k, seed=k) for k in (1, 2, 3)})
    models.update({f"kde {kern} h={h}": fit_kde(x, kern, h) for kern in KERNELS for h in KDE_H_GRID})
    deps = rng.uniform(0, 1320, 1500)
    trips = [make_trip(i, d, 20 + 10 * math.sin(d / 200) + rng.gamma(4, 1.0)) for i, d in enumerate(deps)]
    lrpc = fit_lrpc(trips, 1e-3, seed=2, epochs=20)
    for h in (0.5, 1.0, 2.0):
        models[f"smoothed_pmf h={h}"] = lrpc.with_smoothing("gaussian", h).density(400.0)
    X = np.column_stack([deps / 1320, rng.random(len(deps))])
    y = np.array([t.travel_time for t in trips])
    forest = fit_forest(X, y, {"n_trees": 20, "max_depth": 8}, seed=3)
    for i in range(3):
        models[f"forest-as-gaussian #{i}"] = forest_as_gaussian(forest, X[i])
    masses = {name: integrate(m) for name, m in models.items()}
    worst = max(masses, key=lambda k: abs(masses[k] - 1))
    elapsed = time.perf_counter() - t0
    ok = all(abs(v - 1) <= 1e-3 for v in masses.values()) and elapsed < 60
    record(1, ok, f"{len(masses)} densities, worst {worst} mass {masses[worst]:.6f}, {elapsed:.1f}s")
    assert ok


def make_trip(i, dep, tt):
    from busdensity.data import TripRecord

    return TripRecord(f"A-East-{i:05d}", "A-East", dt.date(2017, 9, 4), "Mon", 36, float(dep), float(dep),
                      float(dep + tt), 10, 5.0, "residential")


# ---------------------------------------------------------------------------
# 2. MLE recovery
# ---------------------------------------------------------------------------

TRUE_LAWS = {
    "normal": ((30.0, 4.0), lambda p: stats.norm(p[0], p[1])),
    "lognormal": ((3.4, 0.15), lambda p: stats.lognorm(p[1], scale=math.exp(p[0]))),
    "logistic": ((30.0, 2.5), lambda p: stats.logistic(p[0], p[1])),
    "loglogistic": ((30.0, 12.0), lambda p: stats.fisk(p[1], scale=p[0])),
    "gamma": ((40.0, 0.75), lambda p: stats.gamma(p[0], scale=p[1])),
    "cauchy": ((30.0, 2.0), lambda p: stats.cauchy(p[0], p[1])),
}


def test_c02_mle_recovery():
    t0 = time.perf_counter()
    n_runs, n = 20, 10_000
    parts, ok = [], True
    for family, (true, law) in TRUE_LAWS.items():
        X = np.stack([law(true).rvs(n, random_state=np.random.default_rng(derive_seed(2, family, r)))
                      for r in range(n_runs)])
        est = fit_parametric_batch(X, np.ones_like(X, bool), family).params
        se = est.std(axis=0, ddof=1)
        within = np.all(np.abs(est - np.asarray(true)) <= 3 * se, axis=1)
        ok &= int(within.sum()) >= 18
        parts.append(f"{family} {int(within.sum())}/20")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 120
    record(2, ok, ", ".join(parts) + f", {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 3. EM
# ---------------------------------------------------------------------------

def test_c03_em_properties():
    rng = np.random.default_rng(derive_seed(3, "em"))
    worst_drop, runs = 0.0, 0
    for r in range(60):
        K = 1 + r % 3
        n = int(rng.integers(max(K, 5), 400))
        x = np.concatenate([rng.normal(rng.uniform(10, 60), rng.uniform(0.5, 8), n),
                            rng.gamma(4, 5, n // 2)])
        tr = np.asarray(fit_gmm(x, K, seed=r).trace)
        worst_drop = min(worst_drop, float(np.min(np.diff(tr) / np.maximum(1.0, np.abs(tr[1:]))))
                         if len(tr) > 1 else 0.0)
        runs += 1
    monotone = worst_drop >= -1e-12
    x = rng.normal(30, 4, 2000)
    g1, nrm = fit_gmm(x, 1, seed=1), fit_parametric(x, "normal")
    k1_gap = max(abs(g1.means[0] - nrm.params[0]), abs(math.sqrt(g1.variances[0]) - nrm.params[1]))
    y = np.concatenate([rng.normal(22, 2, 3000), rng.normal(35, 3, 2000)])
    g2 = fit_gmm(y, 2, seed=5)
    o = np.argsort(g2.means)
    mean_err = np.abs(g2.means[o] - [22, 35])
    w_err = np.abs(g2.weights[o] - [0.6, 0.4])
    ok = monotone and k1_gap <= 1e-6 and np.all(mean_err <= 0.5) and np.all(w_err <= 0.05)
    record(3, ok, f"{runs} runs monotone={monotone} (worst rel step {worst_drop:.1e}), K=1 gap {k1_gap:.1e}, "
                  f"2-comp mean err {mean_err.max():.3f} weight err {w_err.max():.3f}")
    assert ok


# ---------------------------------------------------------------------------
# 4. LR-PC
# ---------------------------------------------------------------------------

def test_c04_lrpc():
    rng = np.random.default_rng(derive_seed(4, "softmax"))
    worst = 0.0
    for _ in range(1000):
        s = rng.normal(0, rng.uniform(0.1, 200), int(rng.integers(1, 80)))
        worst = max(worst, abs(softmax(s).sum() - 1))
    grid = ClassGrid(20, 17)
    zero = LrpcModel("A-East", grid, np.zeros((17, 70)), 0.0)
    uniform_exact = all(np.all(predict_pmf(zero, d) == 1 / 17) for d in (0.0, 500.0, 1319.0))
    mass = integrate(smooth_pmf(predict_pmf(zero, 300.0), grid, "gaussian", 1.0))
    deps = rng.uniform(0, 1320, 3000)
    hour = np.floor(deps / 60).astype(int)
    tt = 20 + (hour * 7) % 11 + rng.uniform(0.05, 0.95, len(deps))
    trips = [make_trip(i, d, t) for i, (d, t) in enumerate(zip(deps, tt))]
    model = fit_lrpc(trips[:2000], 1e-4, seed=4)
    test_dep, test_tt = deps[2000:], tt[2000:]
    pred = np.argmax(model.predict_pmf_matrix(test_dep), axis=1)
    acc = float(np.mean(pred == model.grid.class_of(test_tt)))
    ok = worst <= 1e-9 and uniform_exact and abs(mass - 1) <= 1e-3 and acc > 0.95
    record(4, ok, f"softmax max |sum-1| {worst:.1e}, uniform exact {uniform_exact}, smoothed mass {mass:.6f}, "
                  f"separable accuracy {acc:.3f}")
    assert ok


# ---------------------------------------------------------------------------
# 5. delay oracles
# ---------------------------------------------------------------------------

class TwoPoint:
    def __init__(self, a, b):
        self.a, self.b = a, b

    def sample(self, rng, size):
        return np.where(rng.random(size) < 0.5, self.a, self.b)


def test_c05_delay_oracles():
    s = VehicleSchedule(("t1", "t2", "t3", "t4"), np.array([0.0, 30.0, 55.0, 85.0]), np.array([0.0, 5.0, 3.0, 4.0]))
    laws = [(20.0, 32.0), (18.0, 30.0), (22.0, 35.0)]
    exact = sum(realized_secondary_delays(s, c) for c in itertools.product(*laws)) / 8
    prof = expected_secondary_delay_mc(s, [TwoPoint(*ab) for ab in laws], 10_000, seed=5)
    z = np.abs(prof.expected[1:] - exact[1:]) / prof.stderr[1:]
    enum_ok = bool(np.all(z <= 3))
    kde = Kde(np.arange(20.0, 41.0), "gaussian", 1.0)
    two = VehicleSchedule(("a", "b"), np.array([0.0, 30.0]), np.array([0.0, 0.0]))
    quad = expected_delay_single_predecessor(0.0, 30.0, 0.0, kde)
    mc = expected_secondary_delay_mc(two, [kde], 100_000, seed=6).expected[1]
    rel = abs(mc - quad) / quad
    fixture = VehicleSchedule(("a", "b"), np.array([0.0, 30.0]), np.array([0.0, 5.0]))
    D, _ = realized_departures(fixture, [40.0])
    fix_ok = D[1] == 45.0 and realized_secondary_delays(fixture, [40.0])[1] == 15.0
    ok = enum_ok and rel <= 0.01 and fix_ok
    record(5, ok, f"enumeration max z {z.max():.2f}, quadrature rel err {rel:.4f}, hand fixture exact {fix_ok}")
    assert ok


# ---------------------------------------------------------------------------
# 6. oracle dominance
# ---------------------------------------------------------------------------

DTW_CANDIDATES = ("five_periods", "60", "30", "120", "180")
PANEL = ["normal:knn", "lognormal:knn", "logistic:knn", "loglogistic:knn", "gamma:knn", "cauchy:knn",
         "gmm:knn", "gmm:edtw", "normal:edtw"]


def test_c06_oracle_dominance(paperlike, paper7):
    t0 = time.perf_counter()
    # hyperparameters are tuned once, on the validation slice of the first seed
    tuned = [tune(ModelConfig.parse(s), paper7, seed=7).best for s in ("kde:knn", "kde:edtw", "lrpc", "forest")]
    panel = split_model_list(",".join(PANEL)) + tuned
    seeds = range(7, 27)
    gaps: dict[str, list[float]] = {c.label: [] for c in panel}
    gaps["loglogistic:edtw (validated width)"] = []
    n_trips = []
    for seed in seeds:
        split = paper7 if seed == 7 else paper_split(paperlike, seed)
        n_trips.append(len(split.training) + split.n_gap_trips + len(split.test))
        oracle = nll_from_logpdf(Oracle(paperlike, seed).predict(split.test).logpdf).mean
        width = sweep_dtw(split, ["loglogistic"], DTW_CANDIDATES, seed).best_mode()["loglogistic"]
        configs = panel + [ModelConfig("loglogistic", "edtw", dtw=width)]
        rep = compare_models(split, configs, seed, with_train=False)
        for key, row in zip(list(gaps), rep.rows):
            assert row.error is None, row.error
            gaps[key].append(row.test.mean - oracle)
    dom = {k: oracle_dominance(v, [0.0] * len(v)) for k, v in gaps.items()}
    beaten = [k for k, d in dom.items() if d.beats_oracle]
    true_gap = dom["loglogistic:edtw (validated width)"].mean_gap
    closest = min(dom, key=lambda k: dom[k].mean_gap)
    elapsed = time.perf_counter() - t0
    ok = not beaten and true_gap <= 0.05 and elapsed < 600
    record(6, ok, f"{len(seeds)} seeds (~{int(np.mean(n_trips))} trips each), {len(dom)} estimators, "
                  f"none beats oracle by 3 sigma: {not beaten}; true family gap {true_gap:.4f}; "
                  f"closest {closest} {dom[closest].mean_gap:.4f}; {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 7. aggregation overfitting direction
# ---------------------------------------------------------------------------

def test_c07_aggregation_direction():
    cfg = SynthConfig.load(SPARSE)
    split = paper_split(cfg, 7, SPARSE_TRAIN_END)
    rep = sweep_dtw(split, SIM_ESTIMATORS, ("five_periods", "60", "30"), seed=7, base={"kde": {"h": 2.0}})
    worse = [e for e in SIM_ESTIMATORS if rep.cell(e, "30").validation.mean >= rep.cell(e, "60").validation.mean]
    g60, g30 = rep.cell("gmm", "60"), rep.cell("gmm", "30")
    # sparse windows: evening validation trips only
    sparse = sparse_window_gap(split, cfg)
    gmm_sig = (g30.train.mean < g60.train.mean and g30.validation.mean > g60.validation.mean
               and sparse["30"] > sparse["60"])
    ok = len(worse) >= len(SIM_ESTIMATORS) / 2 and gmm_sig
    record(7, ok, f"30-min >= 60-min validation NLL for {len(worse)}/{len(SIM_ESTIMATORS)} estimators; "
                  f"GMM train {g60.train.mean:.3f}->{g30.train.mean:.3f}, validation {g60.validation.mean:.3f}->"
                  f"{g30.validation.mean:.3f}, sparse-window val-train gap {sparse['60']:.2f}->{sparse['30']:.2f}")
    assert ok


def sparse_window_gap(split, cfg):
    """GMM validation-minus-train NLL on trips in the low-frequency hours."""
    from busdensity.estimators import fit_groups, predict_from_batch
    from busdensity.similarity import DtwSpec, edtw_groups

    low_hours = [h for h, f in enumerate(cfg.frequency) if f == "low"]
    train, val = as_table(split.reduced_training), as_table(split.validation)
    in_low = lambda tab: np.isin((tab.dep // 60).astype(int), low_hours)  # noqa: E731
    out = {}
    for mode in ("60", "30"):
        c = ModelConfig("gmm", "edtw", dtw=mode)
        g_tr = edtw_groups(train, train, DtwSpec.parse(mode))
        batch = fit_groups(c, g_tr, train.tt, 7)
        lp_tr = predict_from_batch(c, batch, g_tr, train.tt).logpdf
        g_va = edtw_groups(val, train, DtwSpec.parse(mode))
        key = {tuple(m.tolist()): i for i, m in enumerate(g_tr.members)}
        rows = np.array([key[tuple(g_va.members[g].tolist())] for g in g_va.query_group])
        lp_va = batch.logpdf(rows, val.tt)
        out[mode] = nll_from_logpdf(lp_va[in_low(val)]).mean - nll_from_logpdf(lp_tr[in_low(train)]).mean
    return out


# ---------------------------------------------------------------------------
# 8. k sweep
# ---------------------------------------------------------------------------

K_GRID = (2, 3, 4, 6, 8, 10, 13, 16, 20, 25, 30, 35, 40)


def test_c08_k_sweep(paper7):
    rep = sweep_k(paper7, SIM_ESTIMATORS, K_GRID, seed=7, base={"kde": {"h": 2.0}})
    sel = rep.selected_k()
    bad = [e for e in SIM_ESTIMATORS if e not in sel or rep.value(e, sel[e]) > rep.value(e, 2)]
    detail = ", ".join(f"{e} k={sel[e]} {rep.value(e, 2):.3f}->{rep.value(e, sel[e]):.3f}" for e in sel)
    ok = not bad and not rep.errors
    record(8, ok, detail)
    assert ok


# ---------------------------------------------------------------------------
# 9. permutation importance
# ---------------------------------------------------------------------------

def test_c09_permutation_importance():
    rng = np.random.default_rng(derive_seed(9, "importance"))
    n = 3000
    X = rng.random((n, 5))
    X[:, 4] = 0.5                       # identical column
    y = 30 + 20 * X[:, 0] + rng.normal(0, 0.5, n)
    forest = fit_forest(X[:2000], y[:2000], {"n_trees": 40, "max_depth": 10}, seed=9)
    imp = [permutation_importance(forest, X[2000:], y[2000:], j, 10, seed=j) for j in range(5)]
    noise = max(abs(v) for v in imp[1:4])
    ratio = imp[0] / noise if noise > 0 else math.inf
    first = int(np.argmax(imp)) == 0
    ok = first and ratio >= 10 and imp[4] == 0.0
    record(9, ok, f"informative {imp[0]:.2f}, max noise {noise:.4f} (ratio {ratio:.0f}x), identical column {imp[4]}")
    assert ok


# ---------------------------------------------------------------------------
# 10. CLI determinism
# ---------------------------------------------------------------------------

def pipeline(workdir: Path):
    steps = [
        ["synth", "--config", str(PAPERLIKE), "--seed", "7", "--out", "data"],
        ["filter", "--input", "data/trips.csv", "--out", "filtered"],
        ["split", "--input", "filtered/filtered.csv", "--train-end", TRAIN_END.isoformat(), "--out", "split"],
        ["fit", "--split", "split", "--model", "kde:knn[h=2]", "--seed", "7", "--out", "models/kde.json"],
        ["fit", "--split", "split", "--model", "forest[n_trees=30]", "--seed", "7", "--out", "models/forest.json"],
        ["predict", "--model", "models/kde.json", "--input", "split/test.csv", "--out", "reports/pred.json"],
        ["evaluate", "--model", "models/forest.json", "--input", "split/test.csv", "--out", "reports/eval.json"],
        ["compare", "--split", "split", "--models", "kde:knn[h=2],loglogistic:knn,lrpc,forest[n_trees=30]",
         "--seed", "7", "--out", "reports/compare"],
        ["sweep-dtw", "--split", "split", "--estimators", "gamma,gmm", "--seed", "7", "--out", "reports/dtw"],
        ["sweep-k", "--split", "split", "--estimators", "gamma,kde", "--k-max", "15", "--seed", "7",
         "--out", "reports/k"],
        ["importance", "--split", "split", "--trees", "20", "--shuffles", "3", "--seed", "7", "--out", "reports/imp"],
        ["delays", "--schedule", str(FIXTURES / "chain5.json"), "--model", "models/kde.json", "--samples", "10000",
         "--seed", "7", "--out", "reports/delays.json"],
    ]
    here = os.getcwd()
    os.chdir(workdir)
    try:
        codes = [run(s) for s in steps]
    finally:
        os.chdir(here)
    return codes


def test_c10_cli_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    codes = pipeline(a) + pipeline(b)
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    differ = [str(f) for f in files if (a / f).read_bytes() != (b / f).read_bytes()]
    same_set = files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    ok = all(c == EXIT_OK for c in codes) and same_set and not differ and len(files) >= 15
    record(10, ok, f"{len(files)} artifacts per run, differing {differ or 'none'}, exit codes {sorted(set(codes))}")
    assert ok


# ---------------------------------------------------------------------------
# 11. table layout
# ---------------------------------------------------------------------------

def test_c11_table_layout(small_split):
    specs = [f"{e}:{s}" for e in SIM_ESTIMATORS for s in ("edtw", "knn")] + ["lrpc", "forest[n_trees=20]"]
    rep = compare_models(small_split, split_model_list(",".join(specs)), seed=11)
    lines = rep.to_text().splitlines()
    head = [c.strip() for c in lines[0].split("  ") if c.strip()]
    body = lines[2:2 + len(specs)]
    structure = head == ["Model", "Similarity method", "Training NLL", "Test NLL", "Test MSE"]
    rows_ok = len(rep.rows) == len(specs) and all(r.error is None for r in rep.rows)
    sims = [ln[len(lines[0].split("Similarity")[0]):].split()[0] for ln in body]
    sims_ok = sims == ["eDTW", "kNN"] * len(SIM_ESTIMATORS) + ["-", "-"]
    cauchy = [ln for ln in body if ln.startswith(DISPLAY["cauchy"])] + [body[1]]
    cauchy_ok = all(ln.split()[-1] == "undefined" for ln in cauchy)
    others_numeric = all(ln.split()[-1].replace(".", "", 1).isdigit() for ln in body[2:])
    ok = structure and rows_ok and sims_ok and cauchy_ok and others_numeric
    record(11, ok, f"{len(rep.rows)} rows x {len(head)} columns, similarity column ok {sims_ok}, "
                  f"Cauchy MSE undefined {cauchy_ok}")
    assert ok
