"""Density models for a selected travel-time sample.

Four variants share the :class:`DensityModel` interface: ``Parametric``
(six families fitted by maximum likelihood), ``Gmm`` (Gaussian mixture fitted
by EM), ``Kde`` and ``SmoothedPmf`` (a kernel-smoothed probability mass
function, produced by :mod:`busdensity.lrpc`).

Fitting is vectorized over *batches* of samples.  A batch is a padded
``(G, m)`` matrix plus a boolean mask; row ``g`` is one sample.  The scalar
``fit_*`` functions are batches of one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

VAR_FLOOR = 1e-4   # minutes^2
PDF_FLOOR = 1e-12
LOG_PDF_FLOOR = math.log(PDF_FLOOR)
CLAMP_TT = 0.01    # minutes; lower bound for sampled travel times

FAMILIES = ("normal", "lognormal", "logistic", "loglogistic", "gamma", "cauchy")
PARAM_NAMES = {
    "normal": ("mu", "sigma"),
    "lognormal": ("mu", "sigma"),       # of log t
    "logistic": ("loc", "scale"),
    "loglogistic": ("scale", "shape"),  # alpha, beta
    "gamma": ("shape", "scale"),
    "cauchy": ("loc", "scale"),
}
LOG_FAMILIES = {"lognormal", "loglogistic", "gamma"}
KERNELS = ("gaussian", "epanechnikov")
_HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)
_LOGISTIC_SD = math.pi / math.sqrt(3.0)


class DomainError(ValueError):
    """A log-family fit received a non-positive travel time."""


# ---------------------------------------------------------------------------
# Family math (broadcasting over parameter arrays)
# ---------------------------------------------------------------------------

def _logistic_std_logpdf(z):
    a = np.abs(z)
    return -a - 2.0 * np.log1p(np.exp(-a))


def family_logpdf(family: str, t, p1, p2):
    t = np.asarray(t, dtype=float)
    if family == "normal":
        z = (t - p1) / p2
        return -0.5 * z * z - np.log(p2) - _HALF_LOG_2PI
    if family == "logistic":
        return _logistic_std_logpdf((t - p1) / p2) - np.log(p2)
    if family == "cauchy":
        z = (t - p1) / p2
        return -math.log(math.pi) - np.log(p2) - np.log1p(z * z)
    pos = t > 0
    lt = np.log(np.where(pos, t, 1.0))
    if family == "lognormal":
        z = (lt - p1) / p2
        out = -0.5 * z * z - np.log(p2) - _HALF_LOG_2PI - lt
    elif family == "loglogistic":
        beta = p2
        out = _logistic_std_logpdf((lt - np.log(p1)) * beta) + np.log(beta) - lt
    elif family == "gamma":
        out = (p1 - 1.0) * lt - np.where(pos, t, 1.0) / p2 - special.gammaln(p1) - p1 * np.log(p2)
    else:
        raise ValueError(f"unknown family {family!r}")
    return np.where(pos, out, -np.inf)


def family_cdf(family: str, t, p1, p2):
    t = np.asarray(t, dtype=float)
    if family == "normal":
        return special.ndtr((t - p1) / p2)
    if family == "logistic":
        return special.expit((t - p1) / p2)
    if family == "cauchy":
        return 0.5 + np.arctan((t - p1) / p2) / math.pi
    pos = t > 0
    lt = np.log(np.where(pos, t, 1.0))
    if family == "lognormal":
        out = special.ndtr((lt - p1) / p2)
    elif family == "loglogistic":
        out = special.expit((lt - np.log(p1)) * p2)
    elif family == "gamma":
        out = special.gammainc(p1, np.where(pos, t, 0.0) / p2)
    else:
        raise ValueError(f"unknown family {family!r}")
    return np.where(pos, out, 0.0)


def family_mean(family: str, p1, p2):
    """Closed-form means; NaN where the mean does not exist."""
    p1, p2 = np.asarray(p1, dtype=float), np.asarray(p2, dtype=float)
    if family in ("normal", "logistic"):
        return p1 + 0.0 * p2
    if family == "lognormal":
        return np.exp(p1 + 0.5 * p2 * p2)
    if family == "gamma":
        return p1 * p2
    if family == "loglogistic":
        beta = p2
        with np.errstate(divide="ignore", invalid="ignore"):
            b = np.pi / beta
            out = p1 * b / np.sin(b)
        return np.where(beta > 1.0, out, np.nan)
    if family == "cauchy":
        return np.full(np.broadcast(p1, p2).shape, np.nan)
    raise ValueError(f"unknown family {family!r}")


def family_sample(family: str, p1, p2, rng: np.random.Generator, size):
    if family == "normal":
        return rng.normal(p1, p2, size)
    if family == "lognormal":
        return np.exp(rng.normal(p1, p2, size))
    if family == "gamma":
        return rng.gamma(p1, p2, size)
    u = rng.random(size)
    if family == "logistic":
        return p1 + p2 * (np.log(u) - np.log1p(-u))
    if family == "loglogistic":
        return p1 * np.exp((np.log(u) - np.log1p(-u)) / p2)
    if family == "cauchy":
        return p1 + p2 * np.tan(np.pi * (u - 0.5))
    raise ValueError(f"unknown family {family!r}")


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------

def kernel_log(kernel: str, u):
    u = np.asarray(u, dtype=float)
    if kernel == "gaussian":
        return -0.5 * u * u - _HALF_LOG_2PI
    if kernel == "epanechnikov":
        inside = np.abs(u) < 1.0
        with np.errstate(divide="ignore"):
            return np.where(inside, np.log(0.75 * np.clip(1.0 - u * u, 0.0, None)), -np.inf)
    raise ValueError(f"unknown kernel {kernel!r}")


def kernel_sample(kernel: str, rng: np.random.Generator, size):
    if kernel == "gaussian":
        return rng.standard_normal(size)
    if kernel == "epanechnikov":
        shape = (size,) if np.ndim(size) == 0 else tuple(size)
        u = rng.uniform(-1.0, 1.0, (3,) + shape)
        pick2 = (np.abs(u[2]) >= np.abs(u[1])) & (np.abs(u[2]) >= np.abs(u[0]))
        return np.where(pick2, u[1], u[2])
    raise ValueError(f"unknown kernel {kernel!r}")


def _masked_logsumexp(a, mask, axis=-1):
    a = np.where(mask, a, -np.inf)
    mx = np.max(a, axis=axis, keepdims=True)
    safe = np.where(np.isfinite(mx), mx, 0.0)
    with np.errstate(divide="ignore"):
        s = np.log(np.sum(np.exp(a - safe), axis=axis, keepdims=True)) + safe
    return np.squeeze(s, axis=axis)


# ---------------------------------------------------------------------------
# Model classes
# ---------------------------------------------------------------------------

def _sinh_grid(center, scale, reach, n):
    u = np.linspace(-math.asinh(reach), math.asinh(reach), n)
    return center + scale * np.sinh(u)


class DensityModel:
    """Evaluable, sampleable travel-time density (minutes)."""

    variant = "abstract"
    flags: tuple[str, ...] = ()

    def _raw_logpdf(self, t):  # pragma: no cover - abstract
        raise NotImplementedError

    def pdf(self, t):
        out = np.exp(self._raw_logpdf(t))
        return float(out) if np.ndim(out) == 0 else out

    def log_pdf(self, t):
        """``log(max(pdf, 1e-12))``: finite everywhere."""
        out = np.maximum(self._raw_logpdf(t), LOG_PDF_FLOOR)
        return float(out) if np.ndim(out) == 0 else out

    def mean(self) -> float | None:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        raise NotImplementedError

    def grid(self, n: int = 20001) -> np.ndarray:
        """Quadrature grid covering all but a negligible tail of the mass."""
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class Parametric(DensityModel):
    family: str
    params: tuple[float, float]
    flags: tuple[str, ...] = ()
    variant = "parametric"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if not all(np.isfinite(self.params)) or self.params[1] <= 0 or (
                self.family in ("gamma", "loglogistic") and self.params[0] <= 0):
            raise ValueError(f"invalid {self.family} parameters {self.params}")

    def _raw_logpdf(self, t):
        return family_logpdf(self.family, t, *self.params)

    def cdf(self, t):
        return family_cdf(self.family, t, *self.params)

    def mean(self):
        m = float(family_mean(self.family, *self.params))
        return None if math.isnan(m) else m

    def sample(self, rng, size):
        return family_sample(self.family, *self.params, rng, size)

    def grid(self, n=20001):
        p1, p2 = self.params
        if self.family == "normal":
            return _sinh_grid(p1, p2, 40.0, n)
        if self.family == "logistic":
            return _sinh_grid(p1, p2, 60.0, n)
        if self.family == "cauchy":
            return _sinh_grid(p1, p2, 1e7, n)
        if self.family == "lognormal":
            return np.exp(_sinh_grid(p1, p2, 40.0, n))
        if self.family == "loglogistic":
            return np.exp(_sinh_grid(math.log(p1), 1.0 / p2, 80.0, n))
        # gamma: the left tail in log t has length of order 1/shape
        m, sd = p1 * p2, math.sqrt(p1) * p2
        lo = math.log(m - 40 * sd) if m > 40 * sd else math.log(p2) - 40.0 / min(p1, 1.0)
        hi = math.log(m + 60 * sd + 60 * p2)
        return np.exp(np.linspace(max(lo, -700.0), hi, n))

    def to_dict(self):
        names = PARAM_NAMES[self.family]
        return {"variant": "parametric", "family": self.family,
                "params": {names[0]: float(self.params[0]), names[1]: float(self.params[1])},
                "flags": list(self.flags)}


@dataclass(frozen=True, eq=False)
class Gmm(DensityModel):
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    flags: tuple[str, ...] = ()
    trace: tuple[float, ...] = field(default=(), repr=False)
    variant = "gmm"

    def _raw_logpdf(self, t):
        t = np.asarray(t, dtype=float)
        sd = np.sqrt(self.variances)
        with np.errstate(divide="ignore"):
            comp = np.log(self.weights) + family_logpdf("normal", t[..., None], self.means, sd)
        return _masked_logsumexp(comp, np.ones_like(comp, dtype=bool))

    def mean(self):
        return float(np.sum(self.weights * self.means))

    def sample(self, rng, size):
        k = rng.choice(len(self.weights), size=size, p=self.weights / self.weights.sum())
        return rng.normal(self.means[k], np.sqrt(self.variances[k]))

    def grid(self, n=20001):
        sd = np.sqrt(self.variances)
        lo, hi = float(np.min(self.means - 40 * sd)), float(np.max(self.means + 40 * sd))
        step = float(np.min(sd)) / 20.0
        return np.linspace(lo, hi, int(min(max(n, (hi - lo) / step), 2_000_000)))

    def to_dict(self):
        return {"variant": "gmm", "weights": self.weights.tolist(), "means": self.means.tolist(),
                "variances": self.variances.tolist(), "flags": list(self.flags)}


@dataclass(frozen=True, eq=False)
class Kde(DensityModel):
    points: np.ndarray
    kernel: str = "gaussian"
    h: float = 1.0
    flags: tuple[str, ...] = ()
    variant = "kde"

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("bandwidth h must be positive")
        if len(self.points) == 0:
            raise ValueError("KDE needs a non-empty sample")
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}")

    def _raw_logpdf(self, t):
        t = np.asarray(t, dtype=float)
        u = (t[..., None] - self.points) / self.h
        lk = kernel_log(self.kernel, u)
        return (_masked_logsumexp(lk, np.ones_like(lk, dtype=bool))
                - math.log(len(self.points)) - math.log(self.h))

    def mean(self):
        return float(np.mean(self.points))

    def sample(self, rng, size):
        j = rng.integers(0, len(self.points), size)
        return self.points[j] + self.h * kernel_sample(self.kernel, rng, size)

    def grid(self, n=20001):
        lo, hi = float(self.points.min() - 10 * self.h), float(self.points.max() + 10 * self.h)
        return np.linspace(lo, hi, int(max(n, 40 * (hi - lo) / self.h)))

    def to_dict(self):
        return {"variant": "kde", "kernel": self.kernel, "h": float(self.h),
                "points": self.points.tolist(), "flags": list(self.flags)}


@dataclass(frozen=True, eq=False)
class SmoothedPmf(DensityModel):
    """``pdf(t) = sum_c pmf[c] * K((t - (c + t_min)) / h) / h``."""

    pmf: np.ndarray
    t_min: float
    kernel: str = "gaussian"
    h: float = 1.0
    flags: tuple[str, ...] = ()
    variant = "smoothed_pmf"

    @property
    def centers(self) -> np.ndarray:
        return np.arange(len(self.pmf)) + self.t_min

    def _raw_logpdf(self, t):
        t = np.asarray(t, dtype=float)
        u = (t[..., None] - self.centers) / self.h
        with np.errstate(divide="ignore"):
            a = kernel_log(self.kernel, u) + np.log(self.pmf)
        return _masked_logsumexp(a, np.ones_like(a, dtype=bool)) - math.log(self.h)

    def mean(self):
        return float(np.sum(self.pmf * self.centers))

    def sample(self, rng, size):
        c = rng.choice(len(self.pmf), size=size, p=self.pmf / self.pmf.sum())
        return self.centers[c] + self.h * kernel_sample(self.kernel, rng, size)

    def grid(self, n=20001):
        lo, hi = self.t_min - 10 * self.h, self.t_min + len(self.pmf) - 1 + 10 * self.h
        return np.linspace(lo, hi, int(max(n, 40 * (hi - lo) / self.h)))

    def to_dict(self):
        return {"variant": "smoothed_pmf", "pmf": self.pmf.tolist(), "t_min": float(self.t_min),
                "kernel": self.kernel, "h": float(self.h), "flags": list(self.flags)}


@dataclass(frozen=True, eq=False)
class PositiveTruncated(DensityModel):
    """A location-scale law restricted to positive travel times."""

    base: Parametric
    flags: tuple[str, ...] = field(default=())

    @property
    def log_mass(self) -> float:
        p1, p2 = self.base.params
        return math.log1p(-float(family_cdf(self.base.family, 0.0, p1, p2)))

    def _raw_logpdf(self, t):
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore"):
            return np.where(t > 0, self.base._raw_logpdf(t) - self.log_mass, -np.inf)

    def mean(self):
        if self.base.family == "cauchy":
            return None
        g = self.grid()
        return float(np.trapezoid(g * self.pdf(g), g))

    def sample(self, rng, size):
        out = self.base.sample(rng, size)
        bad = out <= 0
        while np.any(bad):
            out[bad] = self.base.sample(rng, int(bad.sum()))
            bad = out <= 0
        return out

    def grid(self, n=20001):
        g = self.base.grid(n)
        g = g[g > 0]
        return np.concatenate([[0.0, min(1e-9, g[0] / 2) if len(g) else 1e-9], g])

    def to_dict(self):
        return {"variant": "positive_truncated", "base": self.base.to_dict(), "flags": list(self.flags)}


def from_dict(d: dict) -> DensityModel:
    flags = tuple(d.get("flags", ()))
    v = d["variant"]
    if v == "parametric":
        names = PARAM_NAMES[d["family"]]
        return Parametric(d["family"], (float(d["params"][names[0]]), float(d["params"][names[1]])), flags)
    if v == "gmm":
        return Gmm(np.asarray(d["weights"], float), np.asarray(d["means"], float),
                   np.asarray(d["variances"], float), flags)
    if v == "kde":
        return Kde(np.asarray(d["points"], float), d["kernel"], float(d["h"]), flags)
    if v == "smoothed_pmf":
        return SmoothedPmf(np.asarray(d["pmf"], float), float(d["t_min"]), d["kernel"], float(d["h"]), flags)
    if v == "positive_truncated":
        return PositiveTruncated(from_dict(d["base"]), flags)
    raise ValueError(f"unknown density variant {v!r}")


def pdf(model: DensityModel, t):
    return model.pdf(t)


def log_pdf(model: DensityModel, t):
    return model.log_pdf(t)


def mean(model: DensityModel) -> float | None:
    """Expected travel time, or ``None`` when it does not exist (Cauchy)."""
    return model.mean()


def sample_tt(model: DensityModel, rng: np.random.Generator, size: int) -> tuple[np.ndarray, int]:
    """Draw travel times; draws below 0.01 min are clamped and counted."""
    x = np.asarray(model.sample(rng, size), dtype=float)
    low = x < CLAMP_TT
    return np.where(low, CLAMP_TT, x), int(np.count_nonzero(low))


def integrate(model: DensityModel, n: int = 20001) -> float:
    g = model.grid(n)
    return float(np.trapezoid(model.pdf(g), g))


def numeric_mean(model: DensityModel, n: int = 20001) -> float:
    g = model.grid(n)
    return float(np.trapezoid(g * model.pdf(g), g))


# ---------------------------------------------------------------------------
# Batched parametric MLE
# ---------------------------------------------------------------------------

@dataclass
class ParametricBatch:
    family: str
    params: np.ndarray          # (G, 2)
    loglik: np.ndarray          # (G,)
    init_loglik: np.ndarray     # (G,)
    degenerate: np.ndarray      # (G,) bool

    def __len__(self):
        return len(self.params)

    def logpdf(self, rows, t):
        p = self.params[rows]
        return family_logpdf(self.family, t, p[:, 0], p[:, 1])

    def mean(self, rows):
        p = self.params[rows]
        return family_mean(self.family, p[:, 0], p[:, 1])

    def model(self, g: int) -> Parametric:
        return Parametric(self.family, (float(self.params[g, 0]), float(self.params[g, 1])),
                          ("DegenerateSample",) if self.degenerate[g] else ())


def _row_stats(X, mask):
    w = mask.astype(float)
    n = w.sum(axis=1)
    mean = (X * w).sum(axis=1) / n
    var = (((X - mean[:, None]) ** 2) * w).sum(axis=1) / n
    return w, n, mean, var


def _row_quantile(X, mask, q):
    """Per-row linear-interpolation quantiles over the masked entries
    (same convention as ``np.quantile``); returns shape (len(q), rows)."""
    S = np.sort(np.where(mask, X, np.inf), axis=1)
    n = mask.sum(axis=1)
    rows = np.arange(len(S))
    out = []
    for qq in np.atleast_1d(q):
        pos = qq * (n - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n - 1)
        frac = pos - lo
        a, b = S[rows, lo], S[rows, hi]
        out.append(a + frac * (b - a))
    return np.array(out)


def _locscale_loglik(family_std_logpdf, Y, w, loc, s):
    z = (Y - loc[:, None]) / s[:, None]
    return (w * family_std_logpdf(z)).sum(axis=1) - w.sum(axis=1) * np.log(s)


def _logistic_derivs(z):
    g1 = -np.tanh(0.5 * z)
    g2 = -0.5 * (1.0 - g1 * g1)   # -0.5 sech^2, without overflow in cosh
    return g1, g2


def _cauchy_std_logpdf(z):
    return -math.log(math.pi) - np.log1p(z * z)


def _cauchy_derivs(z):
    d = 1.0 + z * z
    return -2.0 * z / d, -2.0 * (1.0 - z * z) / (d * d)


def _fit_locscale(Y, w, loc0, s0, s_floor, std_logpdf, derivs, max_iter=100):
    """Levenberg-damped Newton in (loc, log scale); every accepted step
    raises the log-likelihood, so the result never falls below the start."""
    loc, eta = loc0.copy(), np.log(np.maximum(s0, s_floor))
    eta_floor = np.log(s_floor)
    ll = _locscale_loglik(std_logpdf, Y, w, loc, np.exp(eta))
    lam = np.full(len(loc), 1e-3)
    done = np.zeros(len(loc), dtype=bool)
    n = w.sum(axis=1)
    for _ in range(max_iter):
        if done.all():
            break
        s = np.exp(eta)
        z = (Y - loc[:, None]) / s[:, None]
        g1, g2 = derivs(z)
        g1, g2 = g1 * w, g2 * w
        grad = np.stack([-g1.sum(1) / s, -n - (z * g1).sum(1)], axis=1)
        h_mm = g2.sum(1) / s ** 2
        h_me = (g2 * z + g1).sum(1) / s
        h_ee = (z * (g1 + z * g2)).sum(1)
        a, b, d = -h_mm, -h_me, -h_ee
        a_d = a + lam * (np.abs(a) + 1e-12)
        d_d = d + lam * (np.abs(d) + 1e-12)
        det = a_d * d_d - b * b
        ok = det > 0
        det_safe = np.where(ok, det, 1.0)
        dl = np.where(ok, (d_d * grad[:, 0] - b * grad[:, 1]) / det_safe,
                      grad[:, 0] / (np.abs(a) + 1.0) * 1e-2)
        de = np.where(ok, (a_d * grad[:, 1] - b * grad[:, 0]) / det_safe,
                      grad[:, 1] / (np.abs(d) + 1.0) * 1e-2)
        new_loc = loc + dl
        new_eta = np.maximum(eta + de, eta_floor)
        new_ll = _locscale_loglik(std_logpdf, Y, w, new_loc, np.exp(new_eta))
        accept = (new_ll >= ll) & ~done & np.isfinite(new_ll)
        gain = np.where(accept, new_ll - ll, 0.0)
        loc = np.where(accept, new_loc, loc)
        eta = np.where(accept, new_eta, eta)
        ll = np.where(accept, new_ll, ll)
        lam = np.where(accept, np.maximum(lam / 10.0, 1e-9), np.minimum(lam * 10.0, 1e12))
        scale_grad = np.abs(grad[:, 0]) * np.exp(eta) + np.abs(grad[:, 1])
        done |= (accept & (gain <= 1e-12 * (1.0 + np.abs(ll))) & (lam < 1e-2)) | (scale_grad < 1e-9 * n) | (lam >= 1e12)
    return loc, np.exp(eta), ll


def _gamma_loglik(a, theta, n, slog, ssum):
    return (a - 1.0) * slog - ssum / theta - n * (special.gammaln(a) + a * np.log(theta))


def fit_parametric_batch(X: np.ndarray, mask: np.ndarray, family: str) -> ParametricBatch:
    """Maximum-likelihood fit of ``family`` to every row of ``X[mask]``.

    Normal and Log-Normal are closed form.  Gamma uses Newton on the shape
    (profile likelihood).  Logistic, Log-Logistic and Cauchy use damped
    Newton from moment/quantile starting points with the scale optimized in
    log space.  Scales are floored so the implied variance at the sample
    centre is at least ``VAR_FLOOR``; rows that hit the floor are flagged
    as degenerate.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    X = np.asarray(X, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if family in LOG_FAMILIES and np.any(mask & ~(X > 0)):
        raise DomainError(f"{family} requires strictly positive travel times")
    w, n, mean_, var = _row_stats(X, mask)
    if family in ("normal", "lognormal"):
        if family == "normal":
            floor = np.full_like(mean_, VAR_FLOOR)
            mu, v = mean_, var
            Y = X
        else:
            Y = np.log(np.where(mask, X, 1.0))
            _, _, mu, v = _row_stats(Y, mask)
            floor = VAR_FLOOR / np.exp(mu) ** 2
        degenerate = v < floor
        sigma = np.sqrt(np.maximum(v, floor))
        ll = (w * family_logpdf(family, np.where(mask, X, 1.0), mu[:, None], sigma[:, None])).sum(1)
        return ParametricBatch(family, np.stack([mu, sigma], 1), ll, ll.copy(), degenerate)

    if family == "gamma":
        slog = (w * np.log(np.where(mask, X, 1.0))).sum(1)
        ssum = (w * X).sum(1)
        cap = mean_ ** 2 / VAR_FLOOR
        a0 = np.minimum(mean_ ** 2 / np.maximum(var, 1e-300), cap)
        ll0 = _gamma_loglik(a0, mean_ / a0, n, slog, ssum)
        s = np.log(mean_) - slog / n
        pos = s > 1e-12
        s_safe = np.where(pos, s, 1.0)
        a = (3.0 - s_safe + np.sqrt((s_safe - 3.0) ** 2 + 24.0 * s_safe)) / (12.0 * s_safe)
        for _ in range(50):
            step = (np.log(a) - special.digamma(a) - s_safe) / (1.0 / a - special.polygamma(1, a))
            new = a - step
            a = np.where(new > 0, new, a / 2.0)
        a = np.where(pos, np.minimum(a, cap), cap)
        theta = mean_ / a
        ll = _gamma_loglik(a, theta, n, slog, ssum)
        better0 = ll0 > ll   # only when the cap binds
        a, theta, ll = np.where(better0, a0, a), np.where(better0, mean_ / a0, theta), np.maximum(ll, ll0)
        return ParametricBatch(family, np.stack([a, theta], 1), ll, ll0, a >= cap * (1 - 1e-12))

    if family == "logistic":
        Y = np.where(mask, X, 0.0)
        loc0, s0 = mean_, np.sqrt(var) / _LOGISTIC_SD
        s_floor = np.full_like(mean_, math.sqrt(VAR_FLOOR) / _LOGISTIC_SD)
        std_logpdf, derivs = _logistic_std_logpdf, _logistic_derivs
    elif family == "loglogistic":
        Y = np.log(np.where(mask, X, 1.0))
        q1, q2, q3 = _row_quantile(Y, mask, [0.25, 0.5, 0.75])
        loc0, s0 = q2, (q3 - q1) / (2.0 * math.log(3.0))
        s_floor = math.sqrt(VAR_FLOOR) / _LOGISTIC_SD / np.exp(q2)
        std_logpdf, derivs = _logistic_std_logpdf, _logistic_derivs
    else:  # cauchy
        Y = np.where(mask, X, 0.0)
        q1, q2, q3 = _row_quantile(Y, mask, [0.25, 0.5, 0.75])
        loc0, s0 = q2, 0.5 * (q3 - q1)
        s_floor = np.full_like(mean_, math.sqrt(VAR_FLOOR))
        std_logpdf, derivs = _cauchy_std_logpdf, _cauchy_derivs
    s0 = np.maximum(s0, s_floor)
    ll0 = _locscale_loglik(std_logpdf, Y, w, loc0, s0)
    loc, s, ll = _fit_locscale(Y, w, loc0, s0, s_floor, std_logpdf, derivs)
    degenerate = s <= s_floor * (1 + 1e-9)
    if family == "loglogistic":
        jac = (w * Y).sum(1)
        return ParametricBatch(family, np.stack([np.exp(loc), 1.0 / s], 1), ll - jac, ll0 - jac, degenerate)
    return ParametricBatch(family, np.stack([loc, s], 1), ll, ll0, degenerate)


def fit_parametric(sample, family: str) -> Parametric:
    """MLE fit of one sample.  Flags ``DegenerateSample`` when the scale floor binds."""
    x = np.asarray(sample, dtype=float).reshape(1, -1)
    if x.shape[1] < 2:
        raise ValueError("two-parameter families need at least 2 observations")
    batch = fit_parametric_batch(x, np.ones_like(x, dtype=bool), family)
    return batch.model(0)


# ---------------------------------------------------------------------------
# Gaussian mixtures by EM
# ---------------------------------------------------------------------------

@dataclass
class GmmBatch:
    weights: np.ndarray      # (G, K); 0 for inactive components
    means: np.ndarray
    variances: np.ndarray
    loglik: np.ndarray       # (G,)
    traces: list[np.ndarray]  # per row, log-likelihood per iteration
    collapsed: np.ndarray    # (G,) some component variance sits at the floor

    def __len__(self):
        return len(self.weights)

    def _comp(self, rows, t):
        with np.errstate(divide="ignore"):
            lw = np.log(self.weights[rows])
        return lw + family_logpdf("normal", np.asarray(t, float)[:, None], self.means[rows],
                                  np.sqrt(self.variances[rows]))

    def logpdf(self, rows, t):
        c = self._comp(rows, t)
        return _masked_logsumexp(c, self.weights[rows] > 0)

    def mean(self, rows):
        return np.sum(self.weights[rows] * self.means[rows], axis=1)

    def model(self, g: int) -> Gmm:
        act = self.weights[g] > 0
        return Gmm(self.weights[g][act], self.means[g][act], self.variances[g][act],
                   ("ComponentCollapse",) if self.collapsed[g] else (), tuple(self.traces[g].tolist()))


def _em_init(X, mask, K, rng):
    n = mask.sum(axis=1)
    kr = np.minimum(K, n)
    Xs = np.sort(np.where(mask, X, np.inf), axis=1)
    _, _, mean_, var = _row_stats(X, mask)
    q = (np.arange(K)[None, :] + 0.5) / np.maximum(kr, 1)[:, None]
    pos = np.clip(q, 0, 1) * (n[:, None] - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n[:, None] - 1)
    frac = pos - lo
    rows = np.arange(len(X))[:, None]
    mu = Xs[rows, lo] * (1 - frac) + Xs[rows, hi] * frac
    sd = np.sqrt(np.maximum(var, VAR_FLOOR))
    mu = mu + rng.normal(0.0, 0.01, mu.shape) * sd[:, None]
    act = np.arange(K)[None, :] < kr[:, None]
    w = np.where(act, 1.0 / np.maximum(kr, 1)[:, None], 0.0)
    v = np.where(act, np.maximum(var, VAR_FLOOR)[:, None], 1.0)
    return w, np.where(act, mu, 0.0), v, act


def _em(X, mask, w, mu, v, act, max_iter, tol):
    G = len(X)
    fm = mask.astype(float)
    n = fm.sum(axis=1)
    Xe = X[:, :, None]

    def estep(w, mu, v):
        with np.errstate(divide="ignore"):
            lr = np.log(w)[:, None, :] + family_logpdf("normal", Xe, mu[:, None, :], np.sqrt(v)[:, None, :])
        lr = np.where(act[:, None, :], lr, -np.inf)
        lp = _masked_logsumexp(lr, act[:, None, :], axis=2)
        lp = np.where(mask, lp, 0.0)
        return lr, lp, (lp * fm).sum(axis=1)

    lr, lp, ll = estep(w, mu, v)
    trace = [ll.copy()]
    done = np.zeros(G, dtype=bool)
    for _ in range(max_iter):
        resp = np.exp(lr - lp[:, :, None]) * fm[:, :, None]
        nk = resp.sum(axis=1)
        alive = act & (nk > 1e-12)
        nk_safe = np.where(alive, nk, 1.0)
        new_mu = np.where(alive, (resp * Xe).sum(axis=1) / nk_safe, mu)
        new_v = np.where(alive, (resp * (Xe - new_mu[:, None, :]) ** 2).sum(axis=1) / nk_safe, v)
        new_v = np.maximum(new_v, VAR_FLOOR)
        new_w = np.where(act, nk / n[:, None], 0.0)
        upd = ~done[:, None]
        w, mu, v = np.where(upd, new_w, w), np.where(upd, new_mu, mu), np.where(upd, new_v, v)
        lr, lp, new_ll = estep(w, mu, v)
        done |= (new_ll - ll) < tol
        ll = new_ll
        trace.append(np.where(upd[:, 0], ll, np.nan))
        if done.all():
            break
    return w, mu, v, ll, np.stack(trace, axis=1)


def fit_gmm_batch(X: np.ndarray, mask: np.ndarray, K: int = 3, rng: np.random.Generator | None = None,
                  max_iter: int = 200, tol: float = 1e-6, restarts: int = 1) -> GmmBatch:
    """EM for a K-component 1-D Gaussian mixture on every row.

    Rows with fewer than K points use as many components as points.
    Stops when the log-likelihood gain drops below ``tol`` or after
    ``max_iter`` iterations; the best of ``restarts`` seeded starts is kept.
    """
    if K < 1:
        raise ValueError("K must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    X = np.where(mask, np.asarray(X, float), 0.0)
    best = None
    for _ in range(max(1, restarts)):
        w, mu, v, act = _em_init(X, mask, K, rng)
        w, mu, v, ll, tr = _em(X, mask, w, mu, v, act, max_iter, tol)
        if best is None:
            best = [w, mu, v, ll, tr]
            continue
        take = ll > best[3]
        best[0] = np.where(take[:, None], w, best[0])
        best[1] = np.where(take[:, None], mu, best[1])
        best[2] = np.where(take[:, None], v, best[2])
        best[3] = np.where(take, ll, best[3])
        width = max(tr.shape[1], best[4].shape[1])
        pad = lambda a: np.pad(a, ((0, 0), (0, width - a.shape[1])), constant_values=np.nan)  # noqa: E731
        best[4] = np.where(take[:, None], pad(tr), pad(best[4]))
    w, mu, v, ll, tr = best
    traces = [row[~np.isnan(row)] for row in tr]
    collapsed = np.any((w > 0) & (v <= VAR_FLOOR * (1 + 1e-12)), axis=1)
    return GmmBatch(w, mu, v, ll, traces, collapsed)


def fit_gmm(sample, K: int = 3, seed: int = 0, max_iter: int = 200, tol: float = 1e-6,
            restarts: int = 1) -> Gmm:
    x = np.asarray(sample, dtype=float).reshape(1, -1)
    if x.shape[1] < K:
        raise ValueError(f"GMM with K={K} needs at least {K} observations")
    batch = fit_gmm_batch(x, np.ones_like(x, dtype=bool), K, np.random.default_rng(seed),
                          max_iter, tol, restarts)
    return batch.model(0)


# ---------------------------------------------------------------------------
# Kernel density estimation
# ---------------------------------------------------------------------------

@dataclass
class KdeBatch:
    X: np.ndarray
    mask: np.ndarray
    kernel: str
    h: float

    def __len__(self):
        return len(self.X)

    def logpdf(self, rows, t, chunk: int = 4096):
        rows = np.asarray(rows)
        t = np.asarray(t, dtype=float)
        out = np.empty(len(rows))
        n = self.mask.sum(axis=1)
        for s in range(0, len(rows), chunk):
            r = rows[s:s + chunk]
            u = (t[s:s + chunk, None] - self.X[r]) / self.h
            out[s:s + chunk] = (_masked_logsumexp(kernel_log(self.kernel, u), self.mask[r])
                                - np.log(n[r]) - math.log(self.h))
        return out

    def mean(self, rows):
        m = self.mask[rows]
        return (self.X[rows] * m).sum(1) / m.sum(1)

    def model(self, g: int) -> Kde:
        return Kde(self.X[g][self.mask[g]].copy(), self.kernel, self.h)


def fit_kde(sample, kernel: str = "gaussian", h: float = 1.0) -> Kde:
    """``pdf(t) = (1 / (m h)) * sum_j K((t - t_j) / h)``."""
    if not h > 0:
        raise ValueError("bandwidth h must be positive")
    return Kde(np.asarray(sample, dtype=float).copy(), kernel, float(h))


def kde_batch(X, mask, kernel: str = "gaussian", h: float = 1.0) -> KdeBatch:
    if not h > 0:
        raise ValueError("bandwidth h must be positive")
    if kernel not in KERNELS:
        raise ValueError(f"unknown kernel {kernel!r}")
    return KdeBatch(np.asarray(X, float), np.asarray(mask, bool), kernel, float(h))
