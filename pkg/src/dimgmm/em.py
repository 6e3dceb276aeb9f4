"""Batch EM for Gaussian mixtures, used as the refit benchmark and bootstrap."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
from scipy.special import logsumexp
from scipy.spatial.distance import cdist
from sklearn.cluster import kmeans_plusplus

from .gmm import Gmm, component_log_densities, repair_covariance

KMEANS = "kmeans"
RANDOM = "random-responsibility"


class EmInitError(RuntimeError):
    pass


@dataclass
class EmConfig:
    num_components: int = 3
    max_iterations: int = 500
    log_likelihood_tolerance: float = 1e-8
    seed: int = 0
    init_method: str = KMEANS
    n_init: int = 1

    def __post_init__(self):
        if self.num_components < 1:
            raise ValueError("num_components must be >= 1")
        if self.log_likelihood_tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.init_method not in (KMEANS, RANDOM):
            raise ValueError(f"unknown init method {self.init_method!r}")
        if self.n_init < 1:
            raise ValueError("n_init must be >= 1")


def _m_step(data: np.ndarray, resp: np.ndarray) -> Gmm:
    nk = resp.sum(axis=0)
    means = (resp.T @ data) / nk[:, None]
    J, D = means.shape
    covs = np.empty((J, D, D))
    for j in range(J):
        diff = data - means[j]
        covs[j] = repair_covariance((resp[:, j, None] * diff).T @ diff / nk[j])
    return Gmm(nk / nk.sum(), means, covs, nk)


def _e_step(data: np.ndarray, gmm: Gmm) -> tuple[np.ndarray, float]:
    with np.errstate(divide="ignore"):
        weighted = component_log_densities(gmm, data) + np.log(gmm.weights)
    norm = logsumexp(weighted, axis=1)
    return np.exp(weighted - norm[:, None]), float(norm.sum())


def _initial_responsibilities(data, cfg: EmConfig, rng: np.random.Generator) -> np.ndarray:
    N, J = data.shape[0], cfg.num_components
    if cfg.init_method == RANDOM:
        return rng.dirichlet(np.ones(J), size=N)
    # k-means++ seeding, then hard assignment to the nearest seed
    seed = int(rng.integers(2**31 - 1))
    centers, _ = kmeans_plusplus(data, n_clusters=J, random_state=seed)
    labels = np.argmin(cdist(data, centers, "sqeuclidean"), axis=1)
    resp = np.zeros((N, J))
    resp[np.arange(N), labels] = 1.0
    return resp


def fit_em(data, cfg: Optional[EmConfig] = None) -> tuple[Gmm, list[float]]:
    """Fit a mixture by EM.

    Returns the model, with accumulators set to the effective component counts,
    and the log-likelihood trace (one entry per E-step). With ``n_init > 1``
    the restart with the highest final log-likelihood wins.
    """
    cfg = cfg or EmConfig()
    data = np.asarray(data, dtype=float)
    if data.ndim != 2:
        raise ValueError("data must be a 2-D array")
    if not np.all(np.isfinite(data)):
        raise ValueError("data contains non-finite values")
    N, J = data.shape[0], cfg.num_components
    if N <= J:
        raise ValueError(f"need more than {J} rows, got {N}")

    rng = np.random.default_rng(cfg.seed)
    best = None
    for _ in range(cfg.n_init):
        gmm, trace = _fit_once(data, cfg, rng)
        if best is None or trace[-1] > best[1][-1]:
            best = (gmm, trace)
    return best


def _fit_once(data, cfg: EmConfig, rng: np.random.Generator) -> tuple[Gmm, list[float]]:
    for _attempt in range(6):
        resp = _initial_responsibilities(data, cfg, rng)
        if np.all(resp.sum(axis=0) > 1.0):
            break
    else:
        raise EmInitError("initialisation kept producing empty components")

    gmm = _m_step(data, resp)
    trace: list[float] = []
    for _ in range(cfg.max_iterations):
        resp, ll = _e_step(data, gmm)
        trace.append(ll)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < cfg.log_likelihood_tolerance * abs(trace[-2]):
            break
        gmm = _m_step(data, resp)
    return gmm, trace


def time_refit(history, new_points, cfg: Optional[EmConfig] = None, every: int = 1,
               indices: Optional[Iterable[int]] = None) -> tuple[np.ndarray, np.ndarray]:
    """Time full EM refits on a growing dataset.

    For update ``n`` (1-based) the model is refit on ``history`` plus the first
    ``n`` new points. Only updates in ``indices`` (or every ``every``-th) are
    timed. Returns ``(update_indices, durations_seconds)``.
    """
    history = np.asarray(history, dtype=float)
    new_points = np.asarray(new_points, dtype=float)
    if indices is None:
        indices = range(every, new_points.shape[0] + 1, every)
    idx = np.array(list(indices), dtype=int)
    durations = np.empty(idx.shape[0])
    for k, n in enumerate(idx):
        data = np.vstack([history, new_points[:n]])
        start = time.perf_counter()
        fit_em(data, cfg)
        durations[k] = time.perf_counter() - start
    return idx, durations
