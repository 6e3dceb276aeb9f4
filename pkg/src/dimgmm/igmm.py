"""Centralized point-wise incremental GMM (judge / update / create)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

import numpy as np
from scipy.special import gammainc

from .gmm import Gmm, distances_sq, log_dets, posterior_from_distances, repair_covariance

UPDATED = "updated"
CREATED = "created"


class CapacityError(RuntimeError):
    pass


class QuantileError(ArithmeticError):
    pass


def chi2_quantile(dof: int, prob: float, tol: float = 1e-12, max_iter: int = 200) -> float:
    """Inverse chi-squared CDF by safeguarded Newton on the regularized gamma."""
    if dof < 1:
        raise ValueError("dof must be >= 1")
    if not 0.0 < prob < 1.0:
        raise ValueError("prob must lie in (0, 1)")
    a = 0.5 * dof

    def cdf(q):
        return gammainc(a, 0.5 * q)

    lo, hi = 0.0, max(1.0, float(dof))
    while cdf(hi) < prob:
        lo, hi = hi, 2.0 * hi
        if hi > 1e8:
            raise QuantileError("could not bracket the quantile")
    q = 0.5 * (lo + hi)
    for _ in range(max_iter):
        f = cdf(q) - prob
        if abs(f) <= tol * min(prob, 1.0 - prob):
            return q
        if f > 0:
            hi = q
        else:
            lo = q
        dens = 0.5 * math.exp((a - 1.0) * math.log(0.5 * q) - 0.5 * q - math.lgamma(a)) if q > 0 else 0.0
        step = q - f / dens if dens > 0 else None
        prev = q
        q = step if step is not None and lo < step < hi else 0.5 * (lo + hi)
        if abs(q - prev) <= 4 * np.finfo(float).eps * q or hi - lo <= 4 * np.finfo(float).eps * hi:
            return q
    raise QuantileError(f"chi2 quantile did not converge for dof={dof}, prob={prob}")


@dataclass
class IgmmConfig:
    """Settings for the incremental mixture.

    ``initial_covariance`` is either a scalar ``s`` (giving ``s**2 * I``), a
    vector of per-dimension standard deviations, or a full matrix.
    """

    beta: float = 0.01
    initial_covariance: Union[float, np.ndarray] = 0.1
    max_components: Optional[int] = None
    on_capacity: str = "error"  # or "replace"
    _threshold_cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if self.on_capacity not in ("error", "replace"):
            raise ValueError("on_capacity must be 'error' or 'replace'")

    def threshold(self, dof: int) -> float:
        if dof not in self._threshold_cache:
            self._threshold_cache[dof] = chi2_quantile(dof, 1.0 - self.beta)
        return self._threshold_cache[dof]

    def initial_matrix(self, dim: int) -> np.ndarray:
        s = np.asarray(self.initial_covariance, dtype=float)
        if s.ndim == 0:
            mat = float(s) ** 2 * np.eye(dim)
        elif s.ndim == 1:
            mat = np.diag(s**2)
        else:
            mat = s.copy()
        if mat.shape != (dim, dim):
            raise ValueError(f"initial covariance has shape {mat.shape}, need {(dim, dim)}")
        np.linalg.cholesky(mat)
        return mat

    @classmethod
    def from_data(cls, data: np.ndarray, fraction: float = 0.1, **kwargs) -> "IgmmConfig":
        """Per-dimension initial spread set to ``fraction`` of the data range."""
        spread = fraction * np.ptp(np.asarray(data, dtype=float), axis=0)
        spread[spread <= 0] = fraction
        return cls(initial_covariance=spread, **kwargs)

    def to_dict(self) -> dict:
        init = np.asarray(self.initial_covariance)
        return {
            "beta": self.beta,
            "initial_covariance": init.tolist() if init.ndim else float(init),
            "max_components": self.max_components,
            "on_capacity": self.on_capacity,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IgmmConfig":
        d = dict(d)
        if "initial_covariance" in d and isinstance(d["initial_covariance"], list):
            d["initial_covariance"] = np.asarray(d["initial_covariance"], dtype=float)
        return cls(**d)


@dataclass
class StepOutcome:
    kind: str
    d_squared: np.ndarray
    posterior_used: np.ndarray = field(default_factory=lambda: np.zeros(0))


def judge(gmm: Gmm, u, cfg: IgmmConfig) -> tuple[bool, np.ndarray]:
    """Accept ``u`` if it lies inside the chi-squared gate of some component."""
    d2 = distances_sq(gmm, u) if gmm.num_components else np.zeros(0)
    accepted = bool(np.any(d2 <= cfg.threshold(gmm.dim)))
    return accepted, d2


def covariance_step(cov: np.ndarray, r: float, xi: np.ndarray) -> np.ndarray:
    """Rank-one form of the covariance update, ``(1-r) S + r(1+r^2-3r) xi xi^T``."""
    eps = r * (1.0 + r * r - 3.0 * r)
    return (1.0 - r) * cov + eps * np.outer(xi, xi)


def update(gmm: Gmm, u, d_squared, post=None) -> Gmm:
    """Soft Robbins-Monro update of every component."""
    u = np.asarray(u, dtype=float)
    if post is None:
        post = posterior_from_distances(gmm.weights, log_dets(gmm), d_squared)
    h = gmm.accumulators + post
    r = post / h
    means = gmm.means.copy()
    covs = gmm.covariances.copy()
    for j in range(gmm.num_components):
        mu_old = gmm.means[j]
        mu_new = mu_old + r[j] * (u - mu_old)
        e = u - mu_new
        dmu = r[j] * (u - mu_old)
        cov = (1.0 - r[j]) * gmm.covariances[j] + r[j] * np.outer(e, e) - np.outer(dmu, dmu)
        means[j] = mu_new
        covs[j] = repair_covariance(cov)
    return Gmm(h / h.sum(), means, covs, h)


def create(gmm: Gmm, u, cfg: IgmmConfig) -> Gmm:
    """Append a component centred at ``u`` with the preset covariance."""
    u = np.asarray(u, dtype=float)
    dim = u.shape[0]
    cov0 = cfg.initial_matrix(dim)
    J = gmm.num_components
    if cfg.max_components is not None and J >= cfg.max_components:
        if cfg.on_capacity == "error":
            raise CapacityError(f"mixture already has {J} components")
        k = int(np.argmin(gmm.accumulators))
        h = gmm.accumulators.copy()
        h[k] = 1.0
        means = gmm.means.copy()
        covs = gmm.covariances.copy()
        means[k] = u
        covs[k] = cov0
        return Gmm(h / h.sum(), means, covs, h)
    h = np.append(gmm.accumulators, 1.0)
    return Gmm(
        h / h.sum(),
        np.vstack([gmm.means, u[None, :]]),
        np.concatenate([gmm.covariances, cov0[None]], axis=0),
        h,
    )


def igmm_step(gmm: Gmm, u, cfg: IgmmConfig) -> tuple[Gmm, StepOutcome]:
    accepted, d2 = judge(gmm, u, cfg)
    if accepted:
        post = posterior_from_distances(gmm.weights, log_dets(gmm), d2)
        return update(gmm, u, d2, post), StepOutcome(UPDATED, d2, post)
    return create(gmm, u, cfg), StepOutcome(CREATED, d2)


def run_igmm(gmm: Gmm, stream: Iterable, cfg: IgmmConfig, snapshot_every: Optional[int] = None):
    """Feed a stream through :func:`igmm_step`.

    Returns the final model, the outcome log and, if ``snapshot_every`` is
    given, the list of ``(n_updates, model)`` snapshots including step 0.
    """
    outcomes = []
    snapshots = [(0, gmm.copy())] if snapshot_every else []
    for n, u in enumerate(stream, start=1):
        gmm, outcome = igmm_step(gmm, u, cfg)
        outcomes.append(outcome)
        if snapshot_every and n % snapshot_every == 0:
            snapshots.append((n, gmm.copy()))
    return gmm, outcomes, snapshots
