"""Propagation of travel-time uncertainty through a vehicle schedule.

A vehicle runs trips 1..m in order.  Trip i cannot leave before its planned
departure d_i, nor before the previous trip arrived and the minimum
in-between time elapsed:

    D_1 = d_1,   D_i = max(D_{i-1} + t_{i-1} + l_{i-1,i}, d_i)

The secondary delay is R_i = D_i - d_i.  Expected delays are estimated by
seeded Monte Carlo over independent per-trip travel-time densities.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import integrate

from ._util import derive_seed, read_json
from .density import CLAMP_TT, DensityModel, sample_tt

DEFAULT_SAMPLES = 10_000
CHUNK = 2_000


class ScheduleWarning(UserWarning):
    pass


@dataclass(frozen=True)
class VehicleSchedule:
    trip_ids: tuple[str, ...]
    departures: np.ndarray       # d_i
    min_between: np.ndarray      # l_{i-1,i}; entry 0 is unused and kept at 0
    q_s: float = 0.0
    beta: float = 1.0

    def __post_init__(self):
        d = np.asarray(self.departures, dtype=float)
        l = np.asarray(self.min_between, dtype=float)
        object.__setattr__(self, "departures", d)
        object.__setattr__(self, "min_between", l)
        if len(d) == 0 or len(d) != len(l) or len(d) != len(self.trip_ids):
            raise ValueError("trip ids, departures and in-between times must have the same non-zero length")
        if np.any(np.diff(d) <= 0):
            raise ValueError("planned departures must be strictly increasing")
        if np.any(l < 0) or self.q_s < 0 or self.beta < 0:
            raise ValueError("in-between times, q_s and beta must be non-negative")
        bad = [self.trip_ids[i] for i in range(1, len(d)) if d[i] < d[i - 1] + l[i]]
        if bad:
            warnings.warn(f"planned departures leave less than the minimum in-between time before {bad}",
                          ScheduleWarning, stacklevel=3)

    def __len__(self) -> int:
        return len(self.departures)

    @classmethod
    def from_dict(cls, d) -> "VehicleSchedule":
        trips = d["trips"]
        return cls(tuple(str(t["trip_id"]) for t in trips),
                   np.array([float(t["d"]) for t in trips]),
                   np.array([float(t.get("l_prev", 0.0) or 0.0) if i else 0.0 for i, t in enumerate(trips)]),
                   float(d.get("q_s", 0.0)), float(d.get("beta", 1.0)))

    def to_dict(self) -> dict:
        return {"trips": [{"trip_id": t, "d": float(self.departures[i]),
                           "l_prev": float(self.min_between[i]) if i else None}
                          for i, t in enumerate(self.trip_ids)],
                "q_s": self.q_s, "beta": self.beta}

    @classmethod
    def load(cls, path: str | Path) -> "VehicleSchedule":
        return cls.from_dict(read_json(path))


@dataclass(frozen=True)
class DelayProfile:
    trip_ids: tuple[str, ...]
    expected: np.ndarray         # E(R_i)
    stderr: np.ndarray
    n_samples: int
    n_clamped: int = 0
    seed: int | None = None
    notes: tuple[str, ...] = field(default=())

    def to_dict(self) -> dict:
        return {"trips": [{"trip_id": t, "expected_delay": float(self.expected[i]), "stderr": float(self.stderr[i])}
                          for i, t in enumerate(self.trip_ids)],
                "n_samples": self.n_samples, "n_clamped": self.n_clamped, "seed": self.seed,
                "total_expected_delay": float(np.sum(self.expected))}


def _propagate(d: np.ndarray, l: np.ndarray, T: np.ndarray) -> np.ndarray:
    """Departures for each row of T, an (n, m-1) matrix of realized times."""
    n, m = T.shape[0], len(d)
    D = np.empty((n, m))
    D[:, 0] = d[0]
    for i in range(1, m):
        D[:, i] = np.maximum(D[:, i - 1] + T[:, i - 1] + l[i], d[i])
    return D


def realized_departures(schedule: VehicleSchedule, travel_times) -> tuple[np.ndarray, np.ndarray]:
    """Actual departures D and arrivals A = D + t.

    ``travel_times`` covers the first m-1 trips, or all m; without the last
    trip's time its arrival is NaN.
    """
    t = np.asarray(travel_times, dtype=float)
    m = len(schedule)
    if t.ndim != 1 or len(t) not in (m - 1, m):
        raise ValueError(f"expected {m - 1} or {m} travel times, got {t.shape}")
    if np.any(t <= 0):
        raise ValueError("travel times must be positive")
    D = _propagate(schedule.departures, schedule.min_between, t[None, : m - 1])[0]
    A = np.full(m, np.nan)
    A[: len(t)] = D[: len(t)] + t
    return D, A


def realized_secondary_delays(schedule: VehicleSchedule, travel_times) -> np.ndarray:
    D, _ = realized_departures(schedule, travel_times)
    return D - schedule.departures


def _chunk(schedule, densities, size, seed):
    rng = np.random.default_rng(seed)
    m = len(schedule)
    T = np.empty((size, m - 1))
    clamped = 0
    for j in range(m - 1):
        T[:, j], c = sample_tt(densities[j], rng, size)
        clamped += c
    R = _propagate(schedule.departures, schedule.min_between, T) - schedule.departures
    return R.sum(axis=0), (R * R).sum(axis=0), clamped


def expected_secondary_delay_mc(schedule: VehicleSchedule, densities: Sequence[DensityModel],
                                n_samples: int = DEFAULT_SAMPLES, seed: int = 0, jobs: int = 1) -> DelayProfile:
    """Monte Carlo E(R_i) with standard errors.

    Replicates are drawn in fixed-size chunks whose seeds derive from
    ``seed`` and the chunk index, and chunk sums are combined in chunk order,
    so the result does not depend on ``jobs``.
    """
    m = len(schedule)
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if len(densities) < m - 1:
        raise ValueError(f"need a density for each of the first {m - 1} trips, got {len(densities)}")
    for dm in densities[: m - 1]:
        if not callable(getattr(dm, "sample", None)):
            raise TypeError(f"{type(dm).__name__} cannot be sampled")
    if m == 1:
        return DelayProfile(schedule.trip_ids, np.zeros(1), np.zeros(1), n_samples, 0, seed)
    sizes = [min(CHUNK, n_samples - s) for s in range(0, n_samples, CHUNK)]
    seeds = [derive_seed(seed, "mc_chunk", i) for i in range(len(sizes))]
    work = lambda a: _chunk(schedule, densities, *a)  # noqa: E731
    if jobs > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            parts = list(ex.map(work, zip(sizes, seeds)))
    else:
        parts = [work(a) for a in zip(sizes, seeds)]
    s1 = np.sum(np.stack([p[0] for p in parts]), axis=0)
    s2 = np.sum(np.stack([p[1] for p in parts]), axis=0)
    n = float(n_samples)
    mean = s1 / n
    if n_samples > 1:
        var = np.maximum(s2 - n * mean * mean, 0.0) / (n - 1)
        se = np.sqrt(var / n)
    else:
        se = np.full(m, np.inf)
    mean[0], se[0] = 0.0, 0.0
    clamped = int(sum(p[2] for p in parts))
    return DelayProfile(schedule.trip_ids, mean, se, n_samples, clamped, seed)


def expected_delay_single_predecessor(d1: float, d2: float, l: float, density: DensityModel) -> float:
    """E[max(d1 + T + l - d2, 0)] by 1-D quadrature over the density."""
    cut = d2 - d1 - l
    grid = np.asarray(density.grid(4097), dtype=float)
    lo, hi = max(float(grid[0]), cut), float(grid[-1])
    if hi <= lo:
        return 0.0
    f = lambda t: (t - cut) * float(density.pdf(t))  # noqa: E731
    val, _ = integrate.quad(f, lo, hi, points=np.linspace(lo, hi, 42)[1:-1], limit=1000)
    return float(val)


def schedule_cost(schedule: VehicleSchedule, profile: DelayProfile) -> float:
    if profile.trip_ids != schedule.trip_ids:
        raise ValueError("delay profile belongs to a different schedule")
    return float(schedule.q_s + schedule.beta * np.sum(profile.expected))


def delay_mse(predicted: Sequence[DelayProfile], realized: Sequence) -> float:
    """Mean over all trips of (r_i - E(R_i))^2 across matched schedules."""
    if len(predicted) != len(realized):
        raise ValueError("predicted and realized schedule counts differ")
    errs = []
    for p, r in zip(predicted, realized):
        r = np.asarray(r, dtype=float)
        if r.shape != p.expected.shape:
            raise ValueError("realized delays do not match the predicted profile")
        errs.append((r - p.expected) ** 2)
    if not errs:
        raise ValueError("no schedules")
    return float(np.mean(np.concatenate(errs)))


__all__ = [
    "CLAMP_TT", "DEFAULT_SAMPLES", "DelayProfile", "ScheduleWarning", "VehicleSchedule", "delay_mse",
    "expected_delay_single_predecessor", "expected_secondary_delay_mc", "realized_departures",
    "realized_secondary_delays", "schedule_cost",
]
