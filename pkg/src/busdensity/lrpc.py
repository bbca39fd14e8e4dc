"""Smoothed logistic regression for probabilistic classification (LR-PC).

Per route, travel time is discretized into 1-minute classes starting at the
floor of the shortest training trip.  A multinomial logistic regression on a
69-dimensional encoding of the scheduled departure predicts a p.m.f. over the
classes, which is then smoothed with a kernel into a density.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import CLOCK_ORIGIN_MIN, SERVICE_SPAN, TripRecord
from .density import KERNELS, SmoothedPmf, _masked_logsumexp, kernel_log

N_HOUR_BINS = 22
N_HALF_HOUR_BINS = 44
FEATURE_DIM = N_HOUR_BINS + N_HALF_HOUR_BINS + 2 + 1
MIN_ROUTE_TRIPS = 10


class SkippedRoute(ValueError):
    """Too few training trips to fit a route model."""


def encode_lrpc_matrix(departures) -> np.ndarray:
    """(n, 69) encoding: 22 hour one-hots, 44 half-hour one-hots, sin, cos of
    the 24-hour clock angle, and the departure scaled to [0, 1) over the span."""
    dep = np.atleast_1d(np.asarray(departures, dtype=float))
    if np.any((dep < 0) | (dep >= SERVICE_SPAN)):
        raise ValueError("scheduled departure outside the service span")
    n = len(dep)
    out = np.zeros((n, FEATURE_DIM))
    rows = np.arange(n)
    out[rows, np.floor(dep / 60.0).astype(int)] = 1.0
    out[rows, N_HOUR_BINS + np.floor(dep / 30.0).astype(int)] = 1.0
    angle = 2.0 * math.pi * (dep + CLOCK_ORIGIN_MIN) / 1440.0
    out[:, 66] = np.sin(angle)
    out[:, 67] = np.cos(angle)
    out[:, 68] = dep / SERVICE_SPAN
    return out


def encode_lrpc_features(scheduled_departure: float) -> np.ndarray:
    return encode_lrpc_matrix([scheduled_departure])[0]


@dataclass(frozen=True)
class ClassGrid:
    t_min: int
    C: int

    @classmethod
    def from_travel_times(cls, tt) -> "ClassGrid":
        tt = np.asarray(tt, dtype=float)
        t_min = int(math.floor(tt.min()))
        return cls(t_min, max(1, int(math.ceil(tt.max())) - t_min))

    def class_of(self, tt) -> np.ndarray:
        c = np.floor(np.asarray(tt, dtype=float) - self.t_min).astype(int)
        return np.clip(c, 0, self.C - 1)

    @property
    def centers(self) -> np.ndarray:
        # c + t_min, the left edge of each class (not the midpoint)
        return np.arange(self.C) + float(self.t_min)


def softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _with_intercept(X):
    return np.hstack([X, np.ones((len(X), 1))])


@dataclass
class LrpcModel:
    route_id: str
    grid: ClassGrid
    weights: np.ndarray          # (C, 70); last column is the intercept
    lam: float
    kernel: str = "gaussian"
    h: float = 1.0
    loss_trace: list[float] = field(default_factory=list)

    def predict_pmf_matrix(self, departures) -> np.ndarray:
        X = _with_intercept(encode_lrpc_matrix(departures))
        return softmax(X @ self.weights.T)

    def density(self, scheduled_departure: float) -> SmoothedPmf:
        return smooth_pmf(self.predict_pmf_matrix([scheduled_departure])[0], self.grid, self.kernel, self.h)

    def logpdf(self, departures, tt) -> np.ndarray:
        """Smoothed log-density of each ``tt`` at its departure (vectorized)."""
        P = self.predict_pmf_matrix(departures)
        u = (np.asarray(tt, float)[:, None] - self.grid.centers[None, :]) / self.h
        with np.errstate(divide="ignore"):
            a = kernel_log(self.kernel, u) + np.log(P)
        return _masked_logsumexp(a, np.ones_like(a, dtype=bool)) - math.log(self.h)

    def means(self, departures) -> np.ndarray:
        return self.predict_pmf_matrix(departures) @ self.grid.centers

    def with_smoothing(self, kernel: str, h: float) -> "LrpcModel":
        return LrpcModel(self.route_id, self.grid, self.weights, self.lam, kernel, h, self.loss_trace)

    def to_dict(self) -> dict:
        return {"route_id": self.route_id, "grid": {"t_min": self.grid.t_min, "C": self.grid.C},
                "lam": self.lam, "kernel": self.kernel, "h": self.h,
                "weights": self.weights.ravel().tolist(), "shape": list(self.weights.shape),
                "loss_trace": list(self.loss_trace)}

    @classmethod
    def from_dict(cls, d) -> "LrpcModel":
        W = np.asarray(d["weights"], dtype=float).reshape(d["shape"])
        return cls(d["route_id"], ClassGrid(d["grid"]["t_min"], d["grid"]["C"]), W, d["lam"],
                   d["kernel"], d["h"], list(d.get("loss_trace", [])))


def _loss(W, X, y, lam):
    S = X @ W.T
    S = S - S.max(axis=1, keepdims=True)
    lse = np.log(np.exp(S).sum(axis=1))
    ce = np.mean(lse - S[np.arange(len(y)), y])
    return float(ce + 0.5 * lam * np.sum(W[:, :-1] ** 2))


def fit_lrpc(trips: Sequence[TripRecord], lam: float = 1e-3, seed: int = 0, epochs: int = 100,
             batch_size: int = 32, step: float = 0.1, kernel: str = "gaussian", h: float = 1.0,
             min_trips: int = MIN_ROUTE_TRIPS) -> LrpcModel:
    """Minibatch SGD on L2-regularized multinomial cross-entropy for one route.

    The step size decays as ``step / sqrt(epoch)``.  The weights of the epoch
    with the lowest full training loss are returned, so the final loss never
    exceeds the loss at the zero initialization.
    """
    routes = {t.route_id for t in trips}
    if len(routes) > 1:
        raise ValueError(f"fit_lrpc expects a single route, got {sorted(routes)}")
    if len(trips) < min_trips:
        raise SkippedRoute(f"{len(trips)} trips < {min_trips}")
    if lam < 0:
        raise ValueError("regularization strength must be non-negative")
    if kernel not in KERNELS or not h > 0:
        raise ValueError("invalid smoothing kernel or bandwidth")
    tt = np.array([t.travel_time for t in trips])
    grid = ClassGrid.from_travel_times(tt)
    y = grid.class_of(tt)
    X = _with_intercept(encode_lrpc_matrix([t.scheduled_departure for t in trips]))
    n = len(y)
    W = np.zeros((grid.C, X.shape[1]))
    trace = [_loss(W, X, y, lam)]
    best_W, best = W.copy(), trace[0]
    rng = np.random.default_rng(seed)
    reg = np.ones(X.shape[1])
    reg[-1] = 0.0
    if grid.C > 1:
        for epoch in range(1, epochs + 1):
            lr = step / math.sqrt(epoch)
            order = rng.permutation(n)
            for s in range(0, n, batch_size):
                b = order[s:s + batch_size]
                P = softmax(X[b] @ W.T)
                P[np.arange(len(b)), y[b]] -= 1.0
                W -= lr * (P.T @ X[b] / len(b) + lam * W * reg)
            trace.append(_loss(W, X, y, lam))
            if trace[-1] < best:
                best, best_W = trace[-1], W.copy()
    route = next(iter(routes))
    return LrpcModel(route, grid, best_W, lam, kernel, h, trace)


def predict_pmf(model: LrpcModel, scheduled_departure: float) -> np.ndarray:
    return model.predict_pmf_matrix([scheduled_departure])[0]


def smooth_pmf(pmf, grid: ClassGrid, kernel: str = "gaussian", h: float = 1.0) -> SmoothedPmf:
    pmf = np.asarray(pmf, dtype=float)
    if len(pmf) != grid.C:
        raise ValueError("p.m.f. length does not match the class grid")
    if np.any(pmf < 0) or abs(pmf.sum() - 1.0) > 1e-9:
        raise ValueError("p.m.f. must be non-negative and sum to 1")
    if not h > 0:
        raise ValueError("bandwidth h must be positive")
    return SmoothedPmf(pmf, float(grid.t_min), kernel, float(h))
