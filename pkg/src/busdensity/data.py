"""AVL trip records: ingestion, MAD outlier filtering, chronological split, features.

Times inside a :class:`TripRecord` are minutes on the *service clock*: minute 0
is 04:00 of the service day and the span runs to 25:59 (minute 1319), so trips
after midnight stay attached to the day they started on.  On disk (the AVL
CSV format) times are milliseconds since midnight of the service date.
"""

from __future__ import annotations

import csv
import datetime as dt
import hashlib
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

SERVICE_SPAN = 1320.0
CLOCK_ORIGIN_MIN = 240.0  # 04:00 expressed in minutes after midnight
MS_PER_MIN = 60_000

DAYS = ("Mon", "Tue", "Wed", "Thu", "Fri")
REGIONS = ("residential", "cross_cc", "from_cc", "to_cc", "from_indust", "to_indust")

AVL_COLUMNS = (
    "trip_id", "route_id", "direction", "date", "day_of_week", "week_number",
    "sched_dep_ms", "act_dep_ms", "act_arr_ms", "n_stops", "distance_km", "region_type",
)


class DataError(ValueError):
    """Input data violates a record invariant or a file schema."""


@dataclass(frozen=True, slots=True)
class TripRecord:
    trip_id: str
    route_id: str
    date: dt.date
    day_of_week: str
    week_number: int
    scheduled_departure: float
    actual_departure: float
    actual_arrival: float
    n_stops: int
    distance_km: float
    region_type: str

    def __post_init__(self):
        if not self.actual_arrival > self.actual_departure:
            raise DataError(f"trip {self.trip_id}: arrival must be after departure")
        if not 0.0 <= self.scheduled_departure < SERVICE_SPAN:
            raise DataError(f"trip {self.trip_id}: scheduled departure outside service span")
        if self.day_of_week not in DAYS:
            raise DataError(f"trip {self.trip_id}: day_of_week {self.day_of_week!r} is not a weekday")
        if self.n_stops < 1 or not self.distance_km > 0:
            raise DataError(f"trip {self.trip_id}: route attributes must be positive")
        if self.region_type not in REGIONS:
            raise DataError(f"trip {self.trip_id}: unknown region_type {self.region_type!r}")

    @property
    def travel_time(self) -> float:
        return self.actual_arrival - self.actual_departure


def weekday_code(date: dt.date) -> str | None:
    wd = date.weekday()
    return DAYS[wd] if wd < 5 else None


# ---------------------------------------------------------------------------
# Columnar view
# ---------------------------------------------------------------------------

class TripTable:
    """Immutable trip collection with numpy column views (built lazily)."""

    def __init__(self, trips: Iterable[TripRecord]):
        self.trips: tuple[TripRecord, ...] = tuple(trips)

    def __len__(self) -> int:
        return len(self.trips)

    def __iter__(self):
        return iter(self.trips)

    def __getitem__(self, idx):
        return self.trips[idx]

    def subset(self, idx) -> "TripTable":
        return TripTable(self.trips[i] for i in np.asarray(idx, dtype=int))

    @cached_property
    def route_ids(self) -> np.ndarray:
        return np.array([t.route_id for t in self.trips], dtype=object)

    @cached_property
    def dep(self) -> np.ndarray:
        return np.array([t.scheduled_departure for t in self.trips], dtype=float)

    @cached_property
    def week(self) -> np.ndarray:
        return np.array([t.week_number for t in self.trips], dtype=float)

    @cached_property
    def tt(self) -> np.ndarray:
        return np.array([t.travel_time for t in self.trips], dtype=float)

    @cached_property
    def date_ordinal(self) -> np.ndarray:
        return np.array([t.date.toordinal() for t in self.trips], dtype=np.int64)

    @cached_property
    def ids(self) -> np.ndarray:
        return np.array([t.trip_id for t in self.trips], dtype=object)

    def route_groups(self) -> dict[str, np.ndarray]:
        """Route id -> row indices, routes in sorted order."""
        groups: dict[str, list[int]] = {}
        for i, r in enumerate(self.route_ids):
            groups.setdefault(r, []).append(i)
        return {r: np.asarray(groups[r], dtype=int) for r in sorted(groups)}


def as_table(trips) -> TripTable:
    return trips if isinstance(trips, TripTable) else TripTable(trips)


def fingerprint(trips: Iterable[TripRecord]) -> str:
    """sha256 over a canonical text form of every record, order-sensitive."""
    h = hashlib.sha256()
    for t in trips:
        h.update(
            f"{t.trip_id}|{t.route_id}|{t.date.isoformat()}|{t.scheduled_departure!r}|"
            f"{t.actual_departure!r}|{t.actual_arrival!r}|{t.n_stops}|{t.distance_km!r}|"
            f"{t.region_type}\n".encode()
        )
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RowRejection:
    line: int
    trip_id: str
    reason: str
    detail: str = ""


@dataclass
class IngestResult:
    trips: list[TripRecord]
    rejected: list[RowRejection] = field(default_factory=list)
    dropped_non_service_days: int = 0
    excluded: int = 0


def _ms_to_clock(ms: str) -> float:
    return float(ms) / MS_PER_MIN - CLOCK_ORIGIN_MIN


def _clock_to_ms(minutes: float) -> int:
    return int(round((minutes + CLOCK_ORIGIN_MIN) * MS_PER_MIN))


def ingest_avl(
    rows: Iterable[Mapping[str, str]],
    holidays: Iterable[dt.date] = (),
    exclude_trip_ids: Iterable[str] = (),
) -> IngestResult:
    """Convert terminal-level AVL rows to :class:`TripRecord` objects.

    Malformed rows are rejected one by one with a reason code
    (``MissingField``, ``BadValue``, ``NonPositiveTravelTime``,
    ``DayMismatch``, ``OutOfSpan``, ``InvalidRecord``); weekend and holiday
    rows are dropped silently and only counted.  ``exclude_trip_ids`` is the
    hook for incomplete trips, vias and detours identified upstream.
    """
    holidays = set(holidays)
    excluded_ids = set(exclude_trip_ids)
    out = IngestResult(trips=[])
    for line, row in enumerate(rows, start=2):
        trip_id = (row.get("trip_id") or "").strip()
        missing = [c for c in AVL_COLUMNS if not (row.get(c) or "").strip()]
        if missing:
            out.rejected.append(RowRejection(line, trip_id, "MissingField", ",".join(missing)))
            continue
        if trip_id in excluded_ids:
            out.excluded += 1
            continue
        try:
            date = dt.date.fromisoformat(row["date"].strip())
            week = int(row["week_number"])
            sched = _ms_to_clock(row["sched_dep_ms"])
            dep = _ms_to_clock(row["act_dep_ms"])
            arr = _ms_to_clock(row["act_arr_ms"])
            n_stops = int(row["n_stops"])
            distance = float(row["distance_km"])
        except ValueError as exc:
            out.rejected.append(RowRejection(line, trip_id, "BadValue", str(exc)))
            continue
        day = weekday_code(date)
        if day is None or date in holidays:
            out.dropped_non_service_days += 1
            continue
        if row["day_of_week"].strip()[:3].title() != day:
            out.rejected.append(RowRejection(line, trip_id, "DayMismatch", row["day_of_week"]))
            continue
        if week != date.isocalendar()[1]:
            out.rejected.append(RowRejection(line, trip_id, "DayMismatch", f"week {week}"))
            continue
        if not arr > dep:
            out.rejected.append(RowRejection(line, trip_id, "NonPositiveTravelTime", f"{arr - dep:.4f}"))
            continue
        if not 0.0 <= sched < SERVICE_SPAN:
            out.rejected.append(RowRejection(line, trip_id, "OutOfSpan", row["sched_dep_ms"]))
            continue
        try:
            out.trips.append(TripRecord(
                trip_id=trip_id,
                route_id=f"{row['route_id'].strip()}-{row['direction'].strip()}",
                date=date, day_of_week=day, week_number=week,
                scheduled_departure=sched, actual_departure=dep, actual_arrival=arr,
                n_stops=n_stops, distance_km=distance,
                region_type=row["region_type"].strip(),
            ))
        except DataError as exc:
            out.rejected.append(RowRejection(line, trip_id, "InvalidRecord", str(exc)))
    return out


def read_avl_rows(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        absent = [c for c in AVL_COLUMNS if c not in (reader.fieldnames or ())]
        if absent:
            raise DataError(f"{path}: missing columns {absent}")
        return list(reader)


def read_trips(path: str | Path) -> list[TripRecord]:
    """Read an already-clean trip file; any rejected row is an error."""
    result = ingest_avl(read_avl_rows(path))
    if result.rejected:
        r = result.rejected[0]
        raise DataError(f"{path}: line {r.line} ({r.trip_id}) rejected: {r.reason} {r.detail}")
    return result.trips


def write_trips(path: str | Path, trips: Iterable[TripRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(AVL_COLUMNS)
        for t in trips:
            line, _, direction = t.route_id.rpartition("-")
            w.writerow([
                t.trip_id, line, direction, t.date.isoformat(), t.day_of_week, t.week_number,
                _clock_to_ms(t.scheduled_departure), _clock_to_ms(t.actual_departure),
                _clock_to_ms(t.actual_arrival), t.n_stops, repr(float(t.distance_km)), t.region_type,
            ])


# ---------------------------------------------------------------------------
# MAD filter
# ---------------------------------------------------------------------------

MAD_TO_SIGMA = 1.4826


@dataclass
class FilterResult:
    kept: list[TripRecord]
    discarded: list[TripRecord]
    small_routes: list[str] = field(default_factory=list)


def mad_filter(trips: Sequence[TripRecord], multiplier: float = 6.0, scale: str = "mad") -> FilterResult:
    """Per-route robust outlier removal around the median travel time.

    A trip is discarded when ``|t - median| > multiplier * s``.  ``scale="mad"``
    uses ``s = 1.4826 * median(|t - median|)``; ``scale="std"`` uses the
    population standard deviation.  Routes with fewer than 3 trips, and
    routes whose scale is zero, are kept whole.
    """
    if multiplier <= 0:
        raise ValueError("multiplier must be positive")
    if scale not in ("mad", "std"):
        raise ValueError(f"unknown scale {scale!r}")
    table = as_table(trips)
    drop = np.zeros(len(table), dtype=bool)
    small = []
    for route, idx in table.route_groups().items():
        if len(idx) < 3:
            small.append(route)
            continue
        t = table.tt[idx]
        med = np.median(t)
        s = MAD_TO_SIGMA * np.median(np.abs(t - med)) if scale == "mad" else np.std(t)
        if s > 0:
            drop[idx] = np.abs(t - med) > multiplier * s
    kept = [t for t, d in zip(table.trips, drop) if not d]
    discarded = [t for t, d in zip(table.trips, drop) if d]
    return FilterResult(kept, discarded, small)


# ---------------------------------------------------------------------------
# Chronological split
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitConfig:
    train_end: dt.date
    gap_days: int = 7
    test_start: dt.date | None = None
    test_end: dt.date | None = None
    validation_fraction: float = 0.2

    @property
    def resolved_test_start(self) -> dt.date:
        return self.test_start or self.train_end + dt.timedelta(days=self.gap_days + 1)

    def to_dict(self) -> dict:
        return {
            "train_end": self.train_end.isoformat(),
            "gap_days": self.gap_days,
            "test_start": self.resolved_test_start.isoformat(),
            "test_end": self.test_end.isoformat() if self.test_end else None,
            "validation_fraction": self.validation_fraction,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SplitConfig":
        parse = lambda s: dt.date.fromisoformat(s) if s else None  # noqa: E731
        return cls(parse(d["train_end"]), d.get("gap_days", 7), parse(d.get("test_start")),
                   parse(d.get("test_end")), d.get("validation_fraction", 0.2))


@dataclass
class DatasetSplit:
    reduced_training: list[TripRecord]
    validation: list[TripRecord]
    test: list[TripRecord]
    config: SplitConfig
    routes_without_validation: list[str] = field(default_factory=list)
    test_routes_absent_from_training: list[str] = field(default_factory=list)
    n_gap_trips: int = 0

    @property
    def training(self) -> list[TripRecord]:
        """Reduced training plus validation (the full training period)."""
        return self.reduced_training + self.validation

    def manifest(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "counts": {"reduced_training": len(self.reduced_training),
                       "validation": len(self.validation), "test": len(self.test),
                       "gap_discarded": self.n_gap_trips},
            "fingerprints": {"reduced_training": fingerprint(self.reduced_training),
                             "validation": fingerprint(self.validation),
                             "test": fingerprint(self.test)},
            "routes_without_validation": self.routes_without_validation,
            "test_routes_absent_from_training": self.test_routes_absent_from_training,
        }


def _recording_key(t: TripRecord):
    return (t.date, t.actual_departure, t.trip_id)


def chronological_split(trips: Sequence[TripRecord], config: SplitConfig) -> DatasetSplit:
    """Training up to ``train_end``, a discarded gap, then the test window.

    The validation set is the last ``floor(fraction * n)`` recorded training
    trips of each route (at least one when the route has 5 or more).
    """
    test_start = config.resolved_test_start
    if test_start <= config.train_end:
        raise ValueError("test window must start after the training period")
    train = [t for t in trips if t.date <= config.train_end]
    test = [t for t in trips
            if t.date >= test_start and (config.test_end is None or t.date <= config.test_end)]
    n_gap = sum(1 for t in trips if config.train_end < t.date < test_start)
    if not test:
        raise ValueError("empty test window")

    by_route: dict[str, list[TripRecord]] = {}
    for t in train:
        by_route.setdefault(t.route_id, []).append(t)
    reduced, validation, no_val = [], [], []
    for route in sorted(by_route):
        rows = sorted(by_route[route], key=_recording_key)
        n_val = int(math.floor(config.validation_fraction * len(rows)))
        if len(rows) >= 5:
            n_val = max(n_val, 1)
        if n_val == 0:
            no_val.append(route)
        reduced.extend(rows[: len(rows) - n_val])
        validation.extend(rows[len(rows) - n_val:])

    absent = sorted({t.route_id for t in test} - set(by_route))
    test = sorted((t for t in test if t.route_id in by_route), key=lambda t: (t.route_id, _recording_key(t)))
    return DatasetSplit(reduced, validation, test, config, no_val, absent, n_gap)


def save_split(split: DatasetSplit, out_dir: str | Path) -> dict:
    out_dir = Path(out_dir)
    write_trips(out_dir / "reduced_training.csv", split.reduced_training)
    write_trips(out_dir / "validation.csv", split.validation)
    write_trips(out_dir / "test.csv", split.test)
    manifest = split.manifest()
    manifest["files"] = {"reduced_training": "reduced_training.csv",
                         "validation": "validation.csv", "test": "test.csv"}
    return manifest


def load_split(split_dir: str | Path) -> DatasetSplit:
    from ._util import read_json

    split_dir = Path(split_dir)
    manifest = read_json(split_dir / "split_manifest.json")
    files = manifest["files"]
    return DatasetSplit(
        read_trips(split_dir / files["reduced_training"]),
        read_trips(split_dir / files["validation"]),
        read_trips(split_dir / files["test"]),
        SplitConfig.from_dict(manifest["config"]),
        manifest.get("routes_without_validation", []),
        manifest.get("test_routes_absent_from_training", []),
        manifest["counts"].get("gap_discarded", 0),
    )


# ---------------------------------------------------------------------------
# Feature encoding
# ---------------------------------------------------------------------------

CATEGORICAL = {"day_of_week", "region_type", "route_id"}
NUMERIC = {"scheduled_departure", "week_number", "n_stops", "distance_km"}
FIXED_LEVELS = {"day_of_week": DAYS, "region_type": REGIONS}


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered features with frozen encodings fitted on training data."""

    features: tuple[tuple[str, str], ...]
    ranges: dict[str, tuple[float, float]] = field(default_factory=dict)
    levels: dict[str, tuple[str, ...]] = field(default_factory=dict)

    @classmethod
    def fit(cls, trips: Sequence[TripRecord], features: Sequence[tuple[str, str]]) -> "FeatureSchema":
        ranges, levels = {}, {}
        for name, enc in features:
            if enc == "onehot":
                if name not in CATEGORICAL:
                    raise ValueError(f"{name} is not categorical")
                levels[name] = FIXED_LEVELS.get(name) or tuple(sorted({getattr(t, name) for t in trips}))
            elif enc in ("raw", "minmax"):
                if name not in NUMERIC:
                    raise ValueError(f"{name} is not numeric")
                if enc == "minmax":
                    vals = [float(getattr(t, name)) for t in trips]
                    if not vals:
                        raise ValueError("cannot fit min-max ranges on an empty training set")
                    ranges[name] = (min(vals), max(vals))
            else:
                raise ValueError(f"unknown encoding {enc!r}")
        return cls(tuple((n, e) for n, e in features), ranges, levels)

    @property
    def dimension(self) -> int:
        return sum(len(self.levels[n]) if e == "onehot" else 1 for n, e in self.features)

    def blocks(self) -> dict[str, list[int]]:
        """Feature name -> column indices in the encoded vector."""
        out, pos = {}, 0
        for name, enc in self.features:
            width = len(self.levels[name]) if enc == "onehot" else 1
            out[name] = list(range(pos, pos + width))
            pos += width
        return out

    def to_dict(self) -> dict:
        return {"features": [list(f) for f in self.features],
                "ranges": {k: list(v) for k, v in self.ranges.items()},
                "levels": {k: list(v) for k, v in self.levels.items()}}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureSchema":
        return cls(tuple(tuple(f) for f in d["features"]),
                   {k: tuple(v) for k, v in d["ranges"].items()},
                   {k: tuple(v) for k, v in d["levels"].items()})


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    schema: FeatureSchema
    unknown_levels: tuple[str, ...] = ()
    clipped: tuple[str, ...] = ()

    def __len__(self):
        return len(self.values)


def _scale(value: float, lo: float, hi: float) -> float:
    return 0.0 if hi <= lo else (value - lo) / (hi - lo)


def encode_features(trip: TripRecord, schema: FeatureSchema) -> FeatureVector:
    values, unknown, clipped = [], [], []
    for name, enc in schema.features:
        raw = getattr(trip, name)
        if enc == "onehot":
            block = [0.0] * len(schema.levels[name])
            if raw in schema.levels[name]:
                block[schema.levels[name].index(raw)] = 1.0
            else:
                unknown.append(name)
            values.extend(block)
        elif enc == "raw":
            values.append(float(raw))
        else:
            v = _scale(float(raw), *schema.ranges[name])
            if v < 0.0 or v > 1.0:
                clipped.append(name)
                v = min(max(v, 0.0), 1.0)
            values.append(v)
    return FeatureVector(np.asarray(values, dtype=float), schema, tuple(unknown), tuple(clipped))


def encode_table(trips, schema: FeatureSchema) -> np.ndarray:
    """Vectorized :func:`encode_features` over many trips (values only)."""
    table = as_table(trips)
    cols = []
    for name, enc in schema.features:
        if enc == "onehot":
            raw = np.array([getattr(t, name) for t in table.trips], dtype=object)
            cols.append(np.stack([(raw == lv).astype(float) for lv in schema.levels[name]], axis=1)
                        if len(raw) else np.zeros((0, len(schema.levels[name]))))
        else:
            raw = np.array([float(getattr(t, name)) for t in table.trips])
            if enc == "minmax":
                lo, hi = schema.ranges[name]
                raw = np.clip((raw - lo) / (hi - lo), 0.0, 1.0) if hi > lo else np.zeros_like(raw)
            cols.append(raw[:, None])
    return np.hstack(cols) if cols else np.zeros((len(table), 0))
