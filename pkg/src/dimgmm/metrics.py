"""Comparison metrics: JS divergence, curve RSE, empirical conditionals, timing."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.integrate import trapezoid
from scipy.stats import spearmanr

from .gmm import Mixture1D, log_mixture_density, pdf_1d

GRID = "grid-1d"
MONTE_CARLO = "monte-carlo"

_LN2 = np.log(2.0)


class InsufficientDataError(ValueError):
    pass


def _js_terms(log_p: np.ndarray, log_q: np.ndarray) -> np.ndarray:
    # pointwise 0.5*[p log(p/m) + q log(q/m)] / m, in bits
    log_m = np.logaddexp(log_p, log_q) - _LN2
    a = log_p - log_m
    b = log_q - log_m
    with np.errstate(invalid="ignore"):
        ta = np.where(np.isneginf(a), 0.0, np.exp(a) * a)
        tb = np.where(np.isneginf(b), 0.0, np.exp(b) * b)
    return 0.5 * (ta + tb) / _LN2


def js_divergence(p, q, method: str = MONTE_CARLO, samples: int = 100_000, seed: int = 0,
                  grid: Optional[np.ndarray] = None) -> float:
    """Jensen-Shannon divergence in bits.

    ``monte-carlo`` draws from ``(p + q)/2`` and averages the pointwise
    divergence density; ``grid-1d`` integrates two 1-D mixtures with the
    trapezoid rule on ``grid`` (default: 2001 points over mean +/- 6 sd of
    the average mixture).
    """
    if method == GRID:
        mp, mq = _as_1d(p), _as_1d(q)
        if grid is None:
            avg = Mixture1D(np.concatenate([mp.weights, mq.weights]) / 2,
                            np.concatenate([mp.means, mq.means]),
                            np.concatenate([mp.variances, mq.variances]))
            grid = avg.grid(2001)
        fp, fq = pdf_1d(mp, grid), pdf_1d(mq, grid)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(fp + fq > 0, _js_terms(np.log(fp), np.log(fq)) * 0.5 * (fp + fq), 0.0)
        return float(max(trapezoid(terms, grid), 0.0))
    if method != MONTE_CARLO:
        raise ValueError(f"unknown method {method!r}")
    if p.dim != q.dim:
        raise ValueError("distributions have different dimensions")
    rng = np.random.default_rng(seed)
    n_p = rng.binomial(samples, 0.5)
    pts = np.vstack([p.sample(n_p, rng), q.sample(samples - n_p, rng)])
    terms = _js_terms(log_mixture_density(p, pts), log_mixture_density(q, pts))
    return float(max(np.mean(terms), 0.0))


def _as_1d(d) -> Mixture1D:
    if isinstance(d, Mixture1D):
        return d
    return Mixture1D.from_gmm(d)


def rse(curve: Sequence[float], benchmark: Sequence[float]) -> float:
    """Relative standard error of ``curve`` against ``benchmark``, in percent."""
    a = np.asarray(curve, dtype=float)
    b = np.asarray(benchmark, dtype=float)
    if a.shape != b.shape:
        raise ValueError("curves must have the same length")
    denom = np.sum(b**2)
    if denom == 0:
        raise ValueError("benchmark curve has zero norm")
    return float(np.sqrt(np.sum((a - b) ** 2) / denom) * 100.0)


@dataclass
class WeightedEcdf:
    values: np.ndarray
    weights: np.ndarray
    effective_size: float

    def cdf(self, grid) -> np.ndarray:
        cum = np.cumsum(self.weights)
        idx = np.searchsorted(self.values, np.asarray(grid, dtype=float), side="right")
        return np.where(idx > 0, cum[np.maximum(idx - 1, 0)], 0.0)

    def histogram(self, bins=50):
        return np.histogram(self.values, bins=bins, weights=self.weights, density=True)


def empirical_conditional(power: np.ndarray, forecast: np.ndarray, y0, site: int,
                          bandwidth=0.05, min_effective: float = 10.0) -> WeightedEcdf:
    """Kernel-weighted ECDF of ``z_site = power - forecast`` near forecast ``y0``.

    Rows are weighted by a Gaussian kernel on the forecast vector with a
    per-dimension ``bandwidth`` (``inf`` gives uniform weights).
    """
    power = np.atleast_2d(np.asarray(power, dtype=float))
    forecast = np.atleast_2d(np.asarray(forecast, dtype=float))
    if power.shape[0] == 0:
        raise InsufficientDataError("dataset is empty")
    bw = np.broadcast_to(np.asarray(bandwidth, dtype=float), (forecast.shape[1],))
    scaled = (forecast - np.asarray(y0, dtype=float)) / bw
    logw = -0.5 * np.sum(scaled**2, axis=1)
    if not np.any(np.isfinite(logw)) or np.max(logw) == -np.inf:
        raise InsufficientDataError("no rows near the conditioning forecast")
    w = np.exp(logw - np.max(logw))
    w /= w.sum()
    ess = 1.0 / np.sum(w**2)
    if ess < min_effective:
        raise InsufficientDataError(f"effective sample size {ess:.1f} below {min_effective}")
    z = power[:, site] - forecast[:, site]
    order = np.argsort(z, kind="stable")
    return WeightedEcdf(z[order], w[order], float(ess))


def timing_report(series: Sequence[float]) -> dict:
    s = np.asarray(series, dtype=float)
    if s.size == 0:
        raise ValueError("empty series")
    if s.size < 2 or np.all(s == s[0]):
        trend = 0.0
    else:
        trend = float(spearmanr(np.arange(s.size), s).statistic)
    return {"min": float(s.min()), "max": float(s.max()), "mean": float(s.mean()), "trend": trend}
