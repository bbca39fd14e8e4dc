"""Synthetic AVL data with known conditional travel-time densities.

Each route has a mean travel time that grows with distance and stop count,
rises over two smooth peak bumps during the day, and may drift by week.  The
noise law is any parametric family whose spread scales with the mean and
widens at the peaks.  Because the law is known, :func:`oracle_density` gives
the exact density behind every generated trip.
"""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from ._util import derive_seed, read_json
from .data import DAYS, SERVICE_SPAN, TripRecord, as_table, weekday_code
from .density import (FAMILIES, VAR_FLOOR, DensityModel, Parametric, PositiveTruncated, family_cdf,
                      family_logpdf, family_sample)
from .estimators import Prediction

FREQUENCY_LEVELS = ("low", "intermediate", "high")

# line, direction, stops, km, region
REFERENCE_ROUTES = (
    ("A", "East", 52, 13.9, "residential"), ("A", "West", 49, 14.5, "residential"),
    ("B", "East", 46, 13.2, "cross_cc"), ("B", "West", 46, 12.0, "cross_cc"),
    ("C", "North", 40, 12.1, "residential"), ("C", "South", 45, 12.3, "residential"),
    ("D", "North", 33, 10.3, "from_indust"), ("D", "South", 36, 10.4, "to_indust"),
    ("E", "East", 50, 14.2, "residential"), ("E", "West", 52, 13.3, "residential"),
    ("F", "East", 34, 7.8, "residential"), ("F", "West", 36, 7.7, "residential"),
    ("G", "North", 17, 4.6, "residential"), ("G", "South", 19, 4.3, "residential"),
    ("H", "North", 37, 9.3, "residential"), ("H", "South", 40, 10.8, "residential"),
    ("I", "East", 71, 15.3, "residential"), ("I", "West", 68, 15.3, "residential"),
    ("J", "North", 28, 7.1, "from_cc"), ("J", "South", 30, 7.1, "to_cc"),
    ("K", "East", 53, 11.1, "to_cc"), ("K", "West", 51, 11.4, "from_cc"),
    ("L", "East", 35, 5.9, "residential"), ("L", "West", 36, 6.0, "residential"),
    ("M", "East", 18, 4.4, "residential"), ("M", "West", 18, 4.0, "residential"),
    ("N", "East", 28, 5.3, "residential"), ("N", "West", 29, 5.3, "residential"),
    ("O", "North", 35, 3.0, "to_indust"), ("O", "South", 40, 3.4, "from_indust"),
    ("P", "East", 74, 9.0, "residential"), ("P", "West", 67, 8.5, "residential"),
    ("Q", "East", 40, 7.0, "residential"), ("Q", "West", 38, 7.0, "residential"),
    ("R", "East", 37, 5.3, "residential"), ("R", "West", 35, 5.3, "residential"),
    ("S", "East", 47, 11.8, "from_indust"), ("S", "West", 51, 11.6, "to_indust"),
    ("T", "North", 34, 8.5, "to_indust"), ("T", "South", 30, 8.5, "from_indust"),
    ("U", "North", 46, 11.1, "residential"), ("U", "South", 42, 10.7, "residential"),
    ("V", "East", 46, 9.5, "residential"), ("V", "West", 49, 8.5, "residential"),
    ("W", "East", 43, 10.3, "residential"), ("W", "West", 47, 11.6, "residential"),
    ("X", "North", 30, 6.6, "from_cc"), ("X", "South", 34, 7.5, "to_cc"),
    ("Y", "North", 30, 8.0, "to_cc"), ("Y", "South", 28, 8.0, "from_cc"),
)

# one entry per service hour 04:00 .. 25:00
DEFAULT_FREQUENCY = ("low",) * 2 + ("high",) * 15 + ("intermediate",) * 2 + ("low",) * 3


@dataclass(frozen=True)
class RouteDef:
    line: str
    direction: str
    n_stops: int
    distance_km: float
    region: str

    @property
    def route_id(self) -> str:
        return f"{self.line}-{self.direction}"


@dataclass(frozen=True)
class Bump:
    center: float   # service-clock minutes
    width: float    # Gaussian sd in minutes
    height: float   # relative increase of the mean at the centre

    def shape(self, dep):
        return np.exp(-0.5 * ((np.asarray(dep, float) - self.center) / self.width) ** 2)


def _clock(text) -> float:
    """'07:30' -> service-clock minutes; numbers pass through."""
    if isinstance(text, (int, float)):
        return float(text)
    h, m = text.split(":")
    return (int(h) * 60 + int(m)) - 240.0


@dataclass(frozen=True)
class SynthConfig:
    routes: tuple[RouteDef, ...] = tuple(RouteDef(*r) for r in REFERENCE_ROUTES)
    family: str = "loglogistic"
    start_date: dt.date = dt.date(2017, 8, 28)
    n_weeks: int = 6
    holidays: tuple[dt.date, ...] = ()
    intercept: float = 3.0       # mean TT = (intercept + per_km*km + per_stop*stops) * route jitter
    per_km: float = 1.6
    per_stop: float = 0.25
    route_jitter: float = 0.1
    bumps: tuple[Bump, ...] = (Bump(_clock("07:30"), 75.0, 0.15), Bump(_clock("16:00"), 90.0, 0.25))
    cv: float = 0.08             # spread / mean off peak
    cv_peak: float = 0.04        # extra spread / mean at a bump centre
    drift_fraction: float = 0.1  # share of routes with a weekly trend
    drift_per_week: float = 0.5  # minutes per week for those routes
    frequency: tuple[str, ...] = DEFAULT_FREQUENCY
    trips_per_hour: tuple[tuple[str, int], ...] = (("low", 2), ("intermediate", 4), ("high", 6))
    low_all_day: tuple[str, ...] = ("O", "P")
    record_prob: float = 0.25
    departure_noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown noise family {self.family!r}")
        if len(self.frequency) != 22 or any(f not in FREQUENCY_LEVELS for f in self.frequency):
            raise ValueError("frequency must give one of low/intermediate/high for each of 22 hours")
        if any(n < 0 for _, n in self.trips_per_hour):
            raise ValueError("trip frequencies must be non-negative")
        if not 0.0 <= self.record_prob <= 1.0:
            raise ValueError("record_prob must lie in [0, 1]")
        if self.cv < 0 or self.cv_peak < 0 or self.n_weeks < 1:
            raise ValueError("invalid noise or date span setting")
        ids = [r.route_id for r in self.routes]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate route definitions")

    @property
    def route_ids(self) -> tuple[str, ...]:
        return tuple(r.route_id for r in self.routes)

    @property
    def dates(self) -> list[dt.date]:
        out = []
        for i in range(7 * self.n_weeks):
            d = self.start_date + dt.timedelta(days=i)
            if weekday_code(d) is not None and d not in self.holidays:
                out.append(d)
        return out

    @property
    def first_week(self) -> int:
        return self.start_date.isocalendar()[1]

    def to_dict(self) -> dict:
        return {
            "routes": [[r.line, r.direction, r.n_stops, r.distance_km, r.region] for r in self.routes],
            "family": self.family, "start_date": self.start_date.isoformat(), "n_weeks": self.n_weeks,
            "holidays": [d.isoformat() for d in self.holidays],
            "intercept": self.intercept, "per_km": self.per_km, "per_stop": self.per_stop,
            "route_jitter": self.route_jitter,
            "bumps": [{"center": b.center, "width": b.width, "height": b.height} for b in self.bumps],
            "cv": self.cv, "cv_peak": self.cv_peak, "drift_fraction": self.drift_fraction,
            "drift_per_week": self.drift_per_week, "frequency": list(self.frequency),
            "trips_per_hour": dict(self.trips_per_hour), "low_all_day": list(self.low_all_day),
            "record_prob": self.record_prob, "departure_noise": self.departure_noise, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthConfig":
        d = dict(d)
        kw: dict = {}
        if "routes" in d:
            routes = d.pop("routes")
            if routes == "reference":
                kw["routes"] = cls.routes
            else:
                kw["routes"] = tuple(RouteDef(*r) if isinstance(r, (list, tuple)) else RouteDef(**r)
                                     for r in routes)
        if "n_routes" in d:
            n = int(d.pop("n_routes"))
            kw["routes"] = kw.get("routes", cls.routes)[:n]
        if "start_date" in d:
            kw["start_date"] = dt.date.fromisoformat(d.pop("start_date"))
        if "holidays" in d:
            kw["holidays"] = tuple(dt.date.fromisoformat(x) for x in d.pop("holidays"))
        if "bumps" in d:
            kw["bumps"] = tuple(Bump(_clock(b["center"]), float(b["width"]), float(b["height"]))
                                for b in d.pop("bumps"))
        if "frequency" in d:
            f = d.pop("frequency")
            if isinstance(f, Mapping):
                # {"default": level, "04-05": level, ...} with inclusive hour ranges
                levels = [f.get("default", "high")] * 22
                for key, level in f.items():
                    if key == "default":
                        continue
                    a, _, b = key.partition("-")
                    for h in range(int(a), int(b or a) + 1):
                        levels[h - 4] = level
                f = levels
            kw["frequency"] = tuple(f)
        if "trips_per_hour" in d:
            kw["trips_per_hour"] = tuple((k, int(v)) for k, v in d.pop("trips_per_hour").items())
        for key in ("low_all_day",):
            if key in d:
                kw[key] = tuple(d.pop(key))
        names = set(cls.__dataclass_fields__)
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown synth config keys {sorted(unknown)}")
        kw.update(d)
        return cls(**kw)

    @classmethod
    def load(cls, path: str | Path) -> "SynthConfig":
        return cls.from_dict(read_json(path))


@dataclass(frozen=True)
class RouteLaw:
    route: RouteDef
    base: float       # off-peak mean travel time in minutes
    drift: float      # minutes per week
    offset: float     # timetable phase in [0, 1)


def route_law(config: SynthConfig, route: RouteDef, seed: int | None = None) -> RouteLaw:
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(derive_seed(seed, "route_law", route.route_id))
    jitter = math.exp(config.route_jitter * rng.standard_normal())
    base = (config.intercept + config.per_km * route.distance_km + config.per_stop * route.n_stops) * jitter
    has_drift = rng.random() < config.drift_fraction
    sign = 1.0 if rng.random() < 0.5 else -1.0
    offset = float(rng.random())
    return RouteLaw(route, base, sign * config.drift_per_week if has_drift else 0.0, offset)


def mean_curve(config: SynthConfig, law: RouteLaw, dep, week) -> np.ndarray:
    dep = np.asarray(dep, dtype=float)
    lift = sum((b.height * b.shape(dep) for b in config.bumps), np.zeros_like(dep))
    return law.base * (1.0 + lift) + law.drift * (np.asarray(week, float) - config.first_week)


def spread_curve(config: SynthConfig, mean, dep) -> np.ndarray:
    dep = np.asarray(dep, dtype=float)
    peak = np.max([b.shape(dep) for b in config.bumps], axis=0) if config.bumps else np.zeros_like(dep)
    return np.asarray(mean, float) * (config.cv + config.cv_peak * peak)


def law_params(family: str, mean, sd) -> tuple[np.ndarray, np.ndarray]:
    """Parameters of ``family`` with the given mean and standard deviation.

    The location families are placed at ``mean``; for the Cauchy ``sd`` sets
    the scale since no moment exists.  Log-logistic matches the mean using a
    shape that gives log-scale spread ``sd / mean``.
    """
    m = np.asarray(mean, float)
    s = np.maximum(np.asarray(sd, float), 1e-12)
    cv = s / m
    if family == "normal":
        return m, s
    if family == "lognormal":
        sig2 = np.log1p(cv * cv)
        return np.log(m) - 0.5 * sig2, np.sqrt(sig2)
    if family == "logistic":
        return m, s * math.sqrt(3.0) / math.pi
    if family == "loglogistic":
        beta = math.pi / (math.sqrt(3.0) * cv)
        b = math.pi / beta
        return m * np.sin(b) / b, beta
    if family == "gamma":
        return (m / s) ** 2, s * s / m
    if family == "cauchy":
        return m, 0.5 * s
    raise ValueError(family)


TRUNCATED_FAMILIES = {"normal", "logistic", "cauchy"}


def _day_weeks(config: SynthConfig):
    return [(d, DAYS[d.weekday()], d.isocalendar()[1]) for d in config.dates]


def timetable(config: SynthConfig, law: RouteLaw) -> np.ndarray:
    """Scheduled departures of one route on one service day."""
    per_hour = dict(config.trips_per_hour)
    deps = []
    for h, level in enumerate(config.frequency):
        if law.route.line in config.low_all_day:
            level = "low"
        n = per_hour[level]
        for j in range(n):
            deps.append(60.0 * h + (j + law.offset) * 60.0 / n)
    return np.array([d for d in deps if d < SERVICE_SPAN])


def _draw(config, law, dep, week, rng):
    m = mean_curve(config, law, dep, week)
    sd = spread_curve(config, m, dep)
    if config.cv == 0 and config.cv_peak == 0:
        return m
    p1, p2 = law_params(config.family, m, sd)
    t = family_sample(config.family, p1, p2, rng, len(m))
    bad = t <= 0
    while np.any(bad):
        t[bad] = family_sample(config.family, p1[bad] if np.ndim(p1) else p1,
                               p2[bad] if np.ndim(p2) else p2, rng, int(bad.sum()))
        bad = t <= 0
    return t


def generate_route(config: SynthConfig, route: RouteDef, seed: int | None = None) -> list[TripRecord]:
    seed = config.seed if seed is None else seed
    law = route_law(config, route, seed)
    rng = np.random.default_rng(derive_seed(seed, "route_trips", route.route_id))
    slots = timetable(config, law)
    out: list[TripRecord] = []
    for date, day, week in _day_weeks(config):
        keep = rng.random(len(slots)) < config.record_prob
        dep = slots[keep]
        late = np.abs(rng.normal(0.0, config.departure_noise, len(dep))) if config.departure_noise > 0 \
            else np.zeros(len(dep))
        tt = _draw(config, law, dep, np.full(len(dep), week), rng) if len(dep) else np.zeros(0)
        slot_ids = np.flatnonzero(keep)
        for j in range(len(dep)):
            a_dep = float(dep[j] + late[j])
            out.append(TripRecord(
                trip_id=f"{route.route_id}-{date:%Y%m%d}-{slot_ids[j]:03d}", route_id=route.route_id,
                date=date, day_of_week=day, week_number=int(week), scheduled_departure=float(dep[j]),
                actual_departure=a_dep, actual_arrival=a_dep + float(tt[j]), n_stops=route.n_stops,
                distance_km=route.distance_km, region_type=route.region))
    return out


def generate(config: SynthConfig, seed: int | None = None) -> list[TripRecord]:
    """All trips, ordered by route definition then date then departure."""
    trips: list[TripRecord] = []
    for route in config.routes:
        trips.extend(generate_route(config, route, seed))
    return trips


class Oracle:
    """Exact conditional densities of a configuration under one seed."""

    def __init__(self, config: SynthConfig, seed: int | None = None):
        self.config = config
        self.seed = config.seed if seed is None else seed
        self.laws = {r.route_id: route_law(config, r, self.seed) for r in config.routes}
        self._dates = set(config.dates)

    def _check(self, trip: TripRecord):
        if trip.route_id not in self.laws:
            raise ValueError(f"route {trip.route_id} is not part of the configuration")
        if trip.date not in self._dates:
            raise ValueError(f"date {trip.date} is outside the configured service days")
        if not 0 <= trip.scheduled_departure < SERVICE_SPAN:
            raise ValueError("scheduled departure outside the service span")

    def params(self, route_id: str, dep, week):
        law = self.laws[route_id]
        m = mean_curve(self.config, law, dep, week)
        return m, spread_curve(self.config, m, dep)

    def density(self, trip: TripRecord) -> DensityModel:
        self._check(trip)
        m, sd = self.params(trip.route_id, [trip.scheduled_departure], [trip.week_number])
        fam = self.config.family
        if sd[0] <= 0:
            return Parametric("normal", (float(m[0]), math.sqrt(VAR_FLOOR)), ("ZeroNoise",))
        p1, p2 = law_params(fam, m, sd)
        base = Parametric(fam, (float(np.ravel(p1)[0]), float(np.ravel(p2)[0])))
        return PositiveTruncated(base) if fam in TRUNCATED_FAMILIES else base

    def predict(self, queries) -> Prediction:
        q = as_table(queries)
        for t in q.trips:
            self._check(t)
        lp = np.empty(len(q))
        mean = np.empty(len(q))
        fam = self.config.family
        for route, idx in q.route_groups().items():
            m, sd = self.params(route, q.dep[idx], q.week[idx])
            mean[idx] = m
            if np.all(sd <= 0):
                lp[idx] = family_logpdf("normal", q.tt[idx], m, math.sqrt(VAR_FLOOR))
                continue
            p1, p2 = law_params(fam, m, sd)
            lp[idx] = family_logpdf(fam, q.tt[idx], p1, p2)
            if fam in TRUNCATED_FAMILIES:
                lp[idx] -= np.log1p(-family_cdf(fam, 0.0, p1, p2))
        return Prediction(lp, mean if fam != "cauchy" else np.full(len(q), np.nan), fam != "cauchy")


def oracle_density(config: SynthConfig, trip: TripRecord, seed: int | None = None) -> DensityModel:
    return Oracle(config, seed).density(trip)


def with_overrides(config: SynthConfig, **kw) -> SynthConfig:
    return replace(config, **kw)
