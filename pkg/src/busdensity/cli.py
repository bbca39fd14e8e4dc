"""Command-line front end: ``busdensity <subcommand> [options]``.

Every JSON artifact carries a ``run`` block with the subcommand, its
settings and the sha256 of each input file, so outputs are self-describing.
Output paths and ``--jobs`` are left out of that block: they do not change
results, and leaving them out keeps reruns byte-identical.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
Failures print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from ._util import derive_seed, read_json, sha256_file, write_json
from .data import (DataError, SplitConfig, TripRecord, as_table, chronological_split, fingerprint, ingest_avl,
                   load_split, mad_filter, read_avl_rows, read_trips, save_split, weekday_code, write_trips)
from .density import DensityModel, DomainError, from_dict as density_from_dict
from .estimators import (ModelConfig, make_predictor, predictor_from_dict, predictor_to_dict,
                         split_model_list)
from .evaluation import DTW_MODES, compare_models, score, sweep_dtw, sweep_k, tune

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    settings: dict
    inputs: dict[str, str] = field(default_factory=dict)   # role -> sha256

    def to_dict(self) -> dict:
        return {"command": self.command, "settings": self.settings, "inputs": self.inputs,
                "version": __version__}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _csv_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _date(text: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not an ISO date: {text!r}") from exc


def _need(path: str | Path, role: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{role} not found: {p}")
    return p


def _inputs(**paths) -> dict[str, str]:
    out = {}
    for role, p in paths.items():
        p = Path(p)
        if p.is_dir():
            manifest = p / "split_manifest.json"
            out[role] = sha256_file(_need(manifest, role))
        else:
            out[role] = sha256_file(_need(p, role))
    return out


def _emit(path: Path, payload: dict, run: RunConfig) -> None:
    write_json(path, {"run": run.to_dict(), **payload})


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _settings(args, drop=("out", "jobs", "func", "command")) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in drop:
            continue
        if isinstance(v, (dt.date, Path)):
            v = str(v)
        out[k] = v
    return out


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    rows = read_avl_rows(_need(args.input, "AVL input"))
    holidays = [dt.date.fromisoformat(x) for x in _csv_list(args.holidays or "")]
    exclude = []
    if args.exclude:
        exclude = [line.strip() for line in Path(_need(args.exclude, "exclusion list")).read_text().splitlines()
                   if line.strip()]
    res = ingest_avl(rows, holidays, exclude)
    out = Path(args.out)
    write_trips(out / "trips.csv", res.trips)
    run = RunConfig("ingest", _settings(args), _inputs(avl=args.input))
    _emit(out / "ingest_report.json", {
        "n_rows": len(rows), "n_trips": len(res.trips), "dropped_non_service_days": res.dropped_non_service_days,
        "excluded": res.excluded, "fingerprint": fingerprint(res.trips),
        "rejected": [{"line": r.line, "trip_id": r.trip_id, "reason": r.reason, "detail": r.detail}
                     for r in res.rejected]}, run)
    return EXIT_OK


def cmd_filter(args) -> int:
    trips = read_trips(_need(args.input, "trip file"))
    res = mad_filter(trips, args.multiplier, args.scale)
    out = Path(args.out)
    write_trips(out / "filtered.csv", res.kept)
    run = RunConfig("filter", _settings(args), _inputs(trips=args.input))
    _emit(out / "filter_report.json", {
        "n_in": len(trips), "n_kept": len(res.kept), "n_discarded": len(res.discarded),
        "discarded_trip_ids": [t.trip_id for t in res.discarded], "small_routes": res.small_routes,
        "fingerprint": fingerprint(res.kept)}, run)
    return EXIT_OK


def cmd_split(args) -> int:
    trips = read_trips(_need(args.input, "trip file"))
    cfg = SplitConfig(args.train_end, args.gap_days, args.test_start, args.test_end, args.validation_fraction)
    split = chronological_split(trips, cfg)
    out = Path(args.out)
    manifest = save_split(split, out)
    run = RunConfig("split", _settings(args), _inputs(trips=args.input))
    _emit(out / "split_manifest.json", manifest, run)
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synth import SynthConfig, generate

    cfg = SynthConfig.load(_need(args.config, "synth config"))
    trips = generate(cfg, args.seed)
    out = Path(args.out)
    write_trips(out / "trips.csv", trips)
    run = RunConfig("synth", _settings(args), _inputs(config=args.config))
    _emit(out / "synth_manifest.json", {"config": cfg.to_dict(), "seed": args.seed, "n_trips": len(trips),
                                        "fingerprint": fingerprint(trips)}, run)
    return EXIT_OK


def _load_model_file(path) -> tuple[dict, object]:
    d = read_json(_need(path, "model file"))
    if not isinstance(d, dict) or "model" not in d:
        raise DataError(f"{path}: not a fitted-model file")
    try:
        return d, predictor_from_dict(d["model"])
    except (KeyError, TypeError, IndexError) as exc:
        raise DataError(f"{path}: malformed model ({type(exc).__name__}: {exc})") from exc


def cmd_fit(args) -> int:
    split = load_split(_need(args.split, "split directory"))
    cfg = ModelConfig.parse(args.model)
    pool = split.reduced_training if args.pool == "reduced" else split.training
    pred = make_predictor(cfg, args.jobs).fit(pool, derive_seed(args.seed, "fit", cfg.label))
    run = RunConfig("fit", _settings(args), _inputs(split=args.split))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    # compact: forest node arrays make indented output very large
    payload = {"run": run.to_dict(), "model": predictor_to_dict(pred), "pool_fingerprint": fingerprint(pool)}
    out.write_text(json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n")
    return EXIT_OK


def cmd_predict(args) -> int:
    _, pred = _load_model_file(args.model)
    trips = read_trips(_need(args.input, "trip file"))
    p = pred.predict(trips)
    rows = []
    dens = pred.densities(trips) if args.densities else None
    for i, t in enumerate(trips):
        row = {"trip_id": t.trip_id, "route_id": t.route_id, "travel_time": t.travel_time,
               "log_pdf": float(max(p.logpdf[i], -1e300)),
               "mean": float(p.mean[i]) if p.mean_defined and np.isfinite(p.mean[i]) else None}
        if dens is not None:
            row["density"] = dens[i].to_dict()
        rows.append(row)
    run = RunConfig("predict", _settings(args), _inputs(model=args.model, trips=args.input))
    _emit(Path(args.out), {"kind": "predictions", "predictions": rows}, run)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    _, pred = _load_model_file(args.model)
    trips = read_trips(_need(args.input, "trip file"))
    n, mse = score(pred.predict(trips), trips)
    run = RunConfig("evaluate", _settings(args), _inputs(model=args.model, trips=args.input))
    _emit(Path(args.out), {"nll": n.to_dict(), "mse": mse.to_dict(), "model": pred.config.to_dict()}, run)
    return EXIT_OK


def _base_params(args) -> dict:
    base = {}
    if getattr(args, "kde_h", None) is not None or getattr(args, "kde_kernel", None):
        base["kde"] = {k: v for k, v in (("h", args.kde_h), ("kernel", args.kde_kernel)) if v is not None}
    if getattr(args, "gmm_k", None) is not None:
        base["gmm"] = {"n_components": args.gmm_k}
    return base


def cmd_sweep_dtw(args) -> int:
    split = load_split(_need(args.split, "split directory"))
    rep = sweep_dtw(split, _csv_list(args.estimators), _csv_list(args.modes), args.seed, _base_params(args),
                    args.jobs)
    out = Path(args.out)
    run = RunConfig("sweep-dtw", _settings(args), _inputs(split=args.split))
    _emit(out / "sweep_dtw.json", rep.to_dict(), run)
    _write_text(out / "sweep_dtw.txt", rep.to_text())
    return EXIT_OK


def cmd_sweep_k(args) -> int:
    split = load_split(_need(args.split, "split directory"))
    if args.k_min < 1 or args.k_max < args.k_min:
        raise UsageError("need 1 <= --k-min <= --k-max")
    rep = sweep_k(split, _csv_list(args.estimators), range(args.k_min, args.k_max + 1), args.seed,
                  _base_params(args), args.jobs, args.plateau_tol)
    out = Path(args.out)
    run = RunConfig("sweep-k", _settings(args), _inputs(split=args.split))
    _emit(out / "sweep_k.json", rep.to_dict(), run)
    _write_text(out / "sweep_k.csv", rep.to_csv())
    _write_text(out / "sweep_k.txt", rep.to_text())
    return EXIT_OK


def cmd_importance(args) -> int:
    from .baseline import fit_forest, forest_schema, format_importance, importance_table
    from .data import encode_table

    split = load_split(_need(args.split, "split directory"))
    train = as_table(split.reduced_training)
    evalset = as_table({"validation": split.validation, "training": split.reduced_training,
                        "test": split.test}[args.on])
    schema = forest_schema(train.trips, include_region=args.include_region)
    hp = {"n_trees": args.trees, "max_depth": args.max_depth}
    forest = fit_forest(encode_table(train, schema), train.tt, hp, derive_seed(args.seed, "importance_forest"),
                        args.jobs, schema)
    names = {"n_stops": "Number of stops", "distance_km": "Distance", "scheduled_departure":
             "Scheduled departure time", "route_id": "Route identifier", "week_number": "Week number",
             "day_of_week": "Day of the week", "region_type": "Region"}
    groups = {names[k]: v for k, v in schema.blocks().items()}
    rows = importance_table(forest, encode_table(evalset, schema), evalset.tt, groups, args.shuffles,
                            derive_seed(args.seed, "importance"))
    out = Path(args.out)
    run = RunConfig("importance", _settings(args), _inputs(split=args.split))
    _emit(out / "importance.json", {"rows": [r.to_dict() for r in rows], "evaluated_on": args.on,
                                    "baseline_mse": float(np.mean((forest.predict(encode_table(evalset, schema))
                                                                   - evalset.tt) ** 2))}, run)
    _write_text(out / "importance.txt", format_importance(rows))
    return EXIT_OK


def _schedule_queries(raw: dict, schedule) -> dict:
    """Query trips described inline by the schedule (route_id, date and route
    attributes on each entry); the scheduled departure is the planned d."""
    out = {}
    for entry, d in zip(raw["trips"], schedule.departures):
        if "route_id" not in entry or "date" not in entry:
            continue
        date = dt.date.fromisoformat(entry["date"])
        out[str(entry["trip_id"])] = TripRecord(
            str(entry["trip_id"]), entry["route_id"], date, weekday_code(date) or "", date.isocalendar()[1],
            float(d), float(d), float(d) + 1.0, int(entry.get("n_stops", 1)),
            float(entry.get("distance_km", 1.0)), entry.get("region_type", "residential"))
    return out


def _schedule_densities(args, schedule) -> list[DensityModel]:
    try:
        return _schedule_densities_inner(args, schedule)
    except (KeyError, TypeError, IndexError) as exc:
        raise DataError(f"{args.model}: malformed entry ({type(exc).__name__}: {exc})") from exc


def _schedule_densities_inner(args, schedule) -> list[DensityModel]:
    """Densities for the first m-1 trips from a density, predictions or model file."""
    d = read_json(_need(args.model, "model/density file"))
    ids = schedule.trip_ids[: len(schedule) - 1]
    if "variant" in d:                       # one density shared by every trip
        dm = density_from_dict(d)
        return [dm] * len(ids)
    if d.get("kind") == "densities":         # {"densities": {trip_id: density}}
        table = d["densities"]
        missing = [i for i in ids if i not in table]
        if missing:
            raise DataError(f"{args.model}: no density for trips {missing}")
        return [density_from_dict(table[i]) for i in ids]
    if d.get("kind") == "predictions":
        table = {r["trip_id"]: r.get("density") for r in d["predictions"]}
        missing = [i for i in ids if table.get(i) is None]
        if missing:
            raise DataError(f"{args.model}: predictions lack densities for trips {missing}")
        return [density_from_dict(table[i]) for i in ids]
    if "model" in d:
        pred = predictor_from_dict(d["model"])
        if args.trips:
            by_id = {t.trip_id: t for t in read_trips(_need(args.trips, "trip file"))}
        else:
            by_id = _schedule_queries(read_json(args.schedule), schedule)
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise DataError(f"{args.trips or args.schedule}: no trip record for schedule trips {missing}")
        return pred.densities([by_id[i] for i in ids])
    raise DataError(f"{args.model}: unrecognized density source")


def cmd_delays(args) -> int:
    from .delay import VehicleSchedule, delay_mse, expected_secondary_delay_mc, schedule_cost

    schedule = VehicleSchedule.load(_need(args.schedule, "schedule"))
    dens = _schedule_densities(args, schedule)
    prof = expected_secondary_delay_mc(schedule, dens, args.samples, derive_seed(args.seed, "delays"), args.jobs)
    payload = {"kind": "delay_profile", **prof.to_dict(), "schedule_cost": schedule_cost(schedule, prof),
               "q_s": schedule.q_s, "beta": schedule.beta}
    inputs = {"schedule": args.schedule, "model": args.model}
    if args.trips:
        inputs["trips"] = args.trips
    if args.realized:
        real = read_json(_need(args.realized, "realized delays"))
        r = [real[t] for t in schedule.trip_ids] if isinstance(real, dict) else real
        payload["delay_mse"] = delay_mse([prof], [r])
        inputs["realized"] = args.realized
    run = RunConfig("delays", _settings(args), _inputs(**inputs))
    _emit(Path(args.out), payload, run)
    return EXIT_OK


def cmd_compare(args) -> int:
    split = load_split(_need(args.split, "split directory"))
    configs = split_model_list(args.models)
    tuning = {}
    if args.tune:
        tuned = []
        for c in configs:
            res = tune(c, split, derive_seed(args.seed, "tune", c.label))
            tuned.append(res.best)
            if res.table:
                tuning[c.label] = res.to_dict()
        configs = tuned
    rep = compare_models(split, configs, derive_seed(args.seed, "compare"), args.jobs, not args.no_train)
    out = Path(args.out)
    run = RunConfig("compare", _settings(args), _inputs(split=args.split))
    payload = rep.to_dict()
    if tuning:
        payload["tuning"] = tuning
    _emit(out / "metrics.json", payload, run)
    _write_text(out / "metrics.txt", rep.to_text())
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="busdensity", description="Conditional travel-time densities and delay propagation.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--seed", type=int, default=0, help="master seed for all randomness")
        sp.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker threads")
        sp.set_defaults(func=func)
        return sp

    sp = add("ingest", cmd_ingest, "validate raw AVL rows into a trip file")
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--holidays", default="", help="comma-separated ISO dates")
    sp.add_argument("--exclude", help="file with one trip_id per line to drop")

    sp = add("filter", cmd_filter, "per-route MAD outlier filter")
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--multiplier", type=float, default=6.0)
    sp.add_argument("--scale", choices=("mad", "std"), default="mad")

    sp = add("split", cmd_split, "chronological train/validation/test split")
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--train-end", type=_date, required=True)
    sp.add_argument("--gap-days", type=int, default=7)
    sp.add_argument("--test-start", type=_date)
    sp.add_argument("--test-end", type=_date)
    sp.add_argument("--validation-fraction", type=float, default=0.2)

    sp = add("synth", cmd_synth, "generate a synthetic trip file")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)

    sp = add("fit", cmd_fit, "fit one model configuration")
    sp.add_argument("--split", required=True)
    sp.add_argument("--model", required=True, help="e.g. kde:knn[h=2], loglogistic:edtw, lrpc, forest")
    sp.add_argument("--pool", choices=("training", "reduced"), default="training")
    sp.add_argument("--out", required=True)

    sp = add("predict", cmd_predict, "per-trip log-density and mean from a fitted model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--densities", action="store_true", help="include each trip's density")

    sp = add("evaluate", cmd_evaluate, "NLL and MSE of a fitted model on a trip file")
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)

    for name, func in (("sweep-dtw", cmd_sweep_dtw), ("sweep-k", cmd_sweep_k)):
        sp = add(name, func, "validation NLL across " + ("window settings" if name == "sweep-dtw" else "k"))
        sp.add_argument("--split", required=True)
        sp.add_argument("--estimators", default="cauchy,gamma,normal,lognormal,logistic,loglogistic,gmm,kde")
        sp.add_argument("--out", required=True)
        sp.add_argument("--kde-h", type=float)
        sp.add_argument("--kde-kernel", choices=("gaussian", "epanechnikov"))
        sp.add_argument("--gmm-k", type=int)
        if name == "sweep-dtw":
            sp.add_argument("--modes", default=",".join(DTW_MODES))
        else:
            sp.add_argument("--k-min", type=int, default=2)
            sp.add_argument("--k-max", type=int, default=40)
            sp.add_argument("--plateau-tol", type=float, default=0.01)

    sp = add("importance", cmd_importance, "permutation feature importance of a forest")
    sp.add_argument("--split", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--on", choices=("validation", "training", "test"), default="validation")
    sp.add_argument("--include-region", action="store_true")
    sp.add_argument("--shuffles", type=int, default=10)
    sp.add_argument("--trees", type=int, default=100)
    sp.add_argument("--max-depth", type=int, default=12)

    sp = add("delays", cmd_delays, "expected secondary delays of a vehicle schedule")
    sp.add_argument("--schedule", required=True)
    sp.add_argument("--model", required=True, help="density, predictions or fitted-model JSON")
    sp.add_argument("--trips", help="trip records for the schedule (with a fitted-model file)")
    sp.add_argument("--samples", type=int, default=10_000)
    sp.add_argument("--realized", help="JSON of realized delays to score against")
    sp.add_argument("--out", required=True)

    sp = add("compare", cmd_compare, "fit and score several models on one split")
    sp.add_argument("--split", required=True)
    sp.add_argument("--models", default="kde:knn,loglogistic:knn,lrpc,forest")
    sp.add_argument("--out", required=True)
    sp.add_argument("--tune", action="store_true", help="grid-search hyperparameters on validation first")
    sp.add_argument("--no-train", action="store_true", help="skip the training-set NLL")
    return p


def _fail(code: int, exc: BaseException, argv) -> int:
    report = {"error": type(exc).__name__, "message": str(exc), "exit_code": code,
              "argv": list(argv)}
    sys.stderr.write(json.dumps(report, sort_keys=True) + "\n")
    return code


def run(argv: Sequence[str]) -> int:
    argv = list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            raise UsageError("missing subcommand; see --help")
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        with np.errstate(over="ignore", under="ignore"):
            return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc, argv)
    except (DataError, FileNotFoundError, KeyError, json.JSONDecodeError, LookupError) as exc:
        return _fail(EXIT_DATA, exc, argv)
    except (FloatingPointError, DomainError, np.linalg.LinAlgError, ArithmeticError) as exc:
        return _fail(EXIT_NUMERIC, exc, argv)
    except ValueError as exc:
        return _fail(EXIT_USAGE if "hyperparameter" in str(exc) or "parse" in str(exc) else EXIT_DATA, exc, argv)


def main() -> None:
    sys.exit(run(sys.argv[1:]))


__all__ = ["EXIT_DATA", "EXIT_NUMERIC", "EXIT_OK", "EXIT_USAGE", "RunConfig", "build_parser", "main", "run"]
