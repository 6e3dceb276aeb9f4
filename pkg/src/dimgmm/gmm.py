"""
Dense Gaussian-mixture mathematics.

The joint model is a mixture over ``u = [x_1..x_M, y_1..y_M]`` where ``x`` are
wind powers and ``y`` the matching forecasts of M participants. Everything here
is centralized and value-semantic; the distributed code in :mod:`dimgmm.node`
is checked against these functions.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import logsumexp, ndtr

LOG_2PI = np.log(2.0 * np.pi)

_JITTER_START = 1e-10
_JITTER_STOP = 1e-6


class DegenerateCovarianceError(np.linalg.LinAlgError):
    """Covariance is not positive definite even after jitter escalation."""


class InvalidModelError(ValueError):
    pass


class DegeneratePosteriorWarning(RuntimeWarning):
    pass


# ---------------------------------------------------------------------------
# positive-definite helpers
# ---------------------------------------------------------------------------


def _jitter_scale(cov: np.ndarray) -> float:
    scale = abs(np.trace(cov)) / cov.shape[0]
    return scale if scale > 0 else 1.0


def cholesky(cov: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, adding escalating diagonal jitter on failure.

    Jitter starts at ``1e-10 * trace/D`` and grows by 10x up to
    ``1e-6 * trace/D``.
    """
    cov = np.asarray(cov, dtype=float)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    scale = _jitter_scale(cov)
    eye = np.eye(cov.shape[0])
    jitter = _JITTER_START
    while jitter <= _JITTER_STOP * (1 + 1e-9):
        try:
            return np.linalg.cholesky(cov + jitter * scale * eye)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise DegenerateCovarianceError("covariance is not positive definite")


def repair_covariance(cov: np.ndarray, clip: bool = True) -> np.ndarray:
    """Return a symmetric positive-definite version of ``cov``.

    Tries the matrix as is, then the jitter ladder of :func:`cholesky`. If that
    still fails and ``clip`` is set, eigenvalues are floored at
    ``1e-6 * (sum of positive eigenvalues) / D``.
    """
    cov = 0.5 * (cov + cov.T)
    try:
        np.linalg.cholesky(cov)
        return cov
    except np.linalg.LinAlgError:
        pass
    scale = _jitter_scale(cov)
    eye = np.eye(cov.shape[0])
    jitter = _JITTER_START
    while jitter <= _JITTER_STOP * (1 + 1e-9):
        candidate = cov + jitter * scale * eye
        try:
            np.linalg.cholesky(candidate)
            return candidate
        except np.linalg.LinAlgError:
            jitter *= 10.0
    if not clip:
        raise DegenerateCovarianceError("covariance is not positive definite")
    vals, vecs = np.linalg.eigh(cov)
    positive = vals[vals > 0].sum()
    floor = max(_JITTER_STOP * positive / cov.shape[0], np.finfo(float).tiny)
    vals = np.maximum(vals, floor)
    out = (vecs * vals) @ vecs.T
    return 0.5 * (out + out.T)


def log_det_from_cholesky(chol: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


def inverse(cov: np.ndarray) -> np.ndarray:
    """Symmetric inverse through the Cholesky factor."""
    chol = cholesky(cov)
    inv = cho_solve((chol, True), np.eye(cov.shape[0]))
    return 0.5 * (inv + inv.T)


# ---------------------------------------------------------------------------
# model types
# ---------------------------------------------------------------------------


@dataclass
class GaussianComponent:
    weight: float
    mean: np.ndarray
    covariance: np.ndarray
    accumulator: float = 0.0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.covariance = np.asarray(self.covariance, dtype=float)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass
class Gmm:
    """Gaussian mixture stored as stacked arrays.

    ``means`` has shape (J, D), ``covariances`` (J, D, D). For a joint model of
    M participants ``D = 2M`` with the power block first.
    """

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    accumulators: np.ndarray = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        J = self.weights.shape[0]
        means = np.asarray(self.means, dtype=float)
        D = means.shape[-1] if means.ndim == 2 else means.size // max(J, 1)
        self.means = means.reshape(J, D)
        self.covariances = np.asarray(self.covariances, dtype=float).reshape(J, D, D)
        if self.accumulators is None:
            self.accumulators = self.weights.copy()
        self.accumulators = np.asarray(self.accumulators, dtype=float).reshape(J)

    @classmethod
    def from_components(cls, components: Sequence[GaussianComponent]) -> "Gmm":
        if not components:
            raise InvalidModelError("need at least one component to infer the dimension")
        return cls(
            weights=[c.weight for c in components],
            means=np.stack([c.mean for c in components]),
            covariances=np.stack([c.covariance for c in components]),
            accumulators=[c.accumulator for c in components],
        )

    @classmethod
    def empty(cls, dim: int) -> "Gmm":
        return cls(np.zeros(0), np.zeros((0, dim)), np.zeros((0, dim, dim)), np.zeros(0))

    @property
    def num_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def num_participants(self) -> int:
        if self.dim % 2:
            raise InvalidModelError(f"dimension {self.dim} is not a joint power/forecast model")
        return self.dim // 2

    def component(self, j: int) -> GaussianComponent:
        return GaussianComponent(
            float(self.weights[j]),
            self.means[j].copy(),
            self.covariances[j].copy(),
            float(self.accumulators[j]),
        )

    def components(self) -> list[GaussianComponent]:
        return [self.component(j) for j in range(self.num_components)]

    def copy(self) -> "Gmm":
        return Gmm(
            self.weights.copy(),
            self.means.copy(),
            self.covariances.copy(),
            self.accumulators.copy(),
        )

    def check(self, atol: float = 1e-10) -> None:
        if self.num_components == 0:
            raise InvalidModelError("mixture has no components")
        if abs(self.weights.sum() - 1.0) > atol:
            raise InvalidModelError(f"weights sum to {self.weights.sum()!r}")
        if np.any(self.weights < 0):
            raise InvalidModelError("negative weight")

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
            "accumulators": self.accumulators.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Gmm":
        dim = int(d["dim"])
        J = len(d["weights"])
        if J == 0:
            return cls.empty(dim)
        return cls(
            d["weights"],
            np.asarray(d["means"], dtype=float).reshape(J, dim),
            np.asarray(d["covariances"], dtype=float).reshape(J, dim, dim),
            d.get("accumulators"),
        )

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n == 0:
            return np.zeros((0, self.dim))
        labels = rng.choice(self.num_components, size=n, p=self.weights / self.weights.sum())
        out = np.empty((n, self.dim))
        for j in range(self.num_components):
            idx = np.flatnonzero(labels == j)
            if idx.size == 0:
                continue
            chol = cholesky(self.covariances[j])
            z = rng.standard_normal((idx.size, self.dim))
            out[idx] = self.means[j] + z @ chol.T
        return out


@dataclass
class BlockView:
    a_block: np.ndarray
    b_block: np.ndarray
    c_block: np.ndarray
    c_inverse: np.ndarray


@dataclass
class Conditional:
    """Per-component conditional parameters for every participant.

    ``alpha``, ``lam`` and ``delta`` have shape (J, M); column ``m`` is the
    conditional of ``x_m`` given the full forecast vector ``y0``.
    """

    alpha: np.ndarray
    lam: np.ndarray
    delta: np.ndarray
    y0: np.ndarray

    def error_mixture(self, m: int) -> "Mixture1D":
        """Mixture for the forecast error ``z_m = x_m - y0_m``."""
        return Mixture1D(self.alpha[:, m], self.lam[:, m] - self.y0[m], self.delta[:, m])


@dataclass
class Mixture1D:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        self.means = np.asarray(self.means, dtype=float).reshape(-1)
        self.variances = np.asarray(self.variances, dtype=float).reshape(-1)

    @classmethod
    def from_gmm(cls, gmm: Gmm) -> "Mixture1D":
        if gmm.dim != 1:
            raise InvalidModelError("expected a one-dimensional mixture")
        return cls(gmm.weights, gmm.means[:, 0], gmm.covariances[:, 0, 0])

    def mean(self) -> float:
        return float(np.dot(self.weights, self.means))

    def std(self) -> float:
        second = np.dot(self.weights, self.variances + self.means**2)
        return float(np.sqrt(max(second - self.mean() ** 2, 0.0)))

    def grid(self, num: int = 2001, width: float = 6.0) -> np.ndarray:
        mu, sd = self.mean(), self.std()
        return np.linspace(mu - width * sd, mu + width * sd, num)

    def pdf(self, grid) -> np.ndarray:
        return pdf_1d(self, grid)

    def cdf(self, grid) -> np.ndarray:
        return cdf_1d(self, grid)


# ---------------------------------------------------------------------------
# densities and distances
# ---------------------------------------------------------------------------


def _whitened(mean: np.ndarray, cov: np.ndarray, u: np.ndarray):
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != mean.shape[0]:
        raise ValueError(f"point has dimension {u.shape[-1]}, model has {mean.shape[0]}")
    chol = cholesky(cov)
    diff = (u - mean).T
    white = solve_triangular(chol, diff, lower=True)
    return chol, white


def mahalanobis_sq(comp: GaussianComponent, u) -> float:
    """Squared Mahalanobis distance of ``u`` from the component."""
    _, white = _whitened(comp.mean, comp.covariance, u)
    return float(np.sum(white**2))


def _log_gaussian(mean, cov, u) -> np.ndarray:
    chol, white = _whitened(mean, cov, u)
    d2 = np.sum(white**2, axis=0)
    return -0.5 * (mean.shape[0] * LOG_2PI + log_det_from_cholesky(chol) + d2)


def log_component_density(comp: GaussianComponent, u):
    out = _log_gaussian(comp.mean, comp.covariance, u)
    return float(out) if np.ndim(out) == 0 else out


def component_density(comp: GaussianComponent, u):
    return np.exp(log_component_density(comp, u))


def component_log_densities(gmm: Gmm, points: np.ndarray) -> np.ndarray:
    """Log density of every point under every component, shape (N, J)."""
    points = np.atleast_2d(points)
    out = np.empty((points.shape[0], gmm.num_components))
    for j in range(gmm.num_components):
        out[:, j] = _log_gaussian(gmm.means[j], gmm.covariances[j], points)
    return out


def log_mixture_density(gmm: Gmm, points) -> np.ndarray:
    if gmm.num_components == 0:
        raise InvalidModelError("mixture has no components")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    with np.errstate(divide="ignore"):
        logw = np.log(gmm.weights)
    out = logsumexp(component_log_densities(gmm, pts) + logw, axis=1)
    return out[0] if np.ndim(points) == 1 else out


def mixture_density(gmm: Gmm, u):
    return np.exp(log_mixture_density(gmm, u))


def posterior_from_distances(weights, log_dets, d_squared) -> np.ndarray:
    """Component posteriors from squared distances.

    Uses the standard Gaussian normalisation ``w_j det(S_j)^(-1/2) exp(-d_j/2)``;
    the ``(2 pi)^D`` factor is common to all components and cancels. Works for
    any block (full covariance or the forecast block alone).
    """
    weights = np.asarray(weights, dtype=float)
    with np.errstate(divide="ignore"):
        logits = np.log(weights) - 0.5 * np.asarray(log_dets) - 0.5 * np.asarray(d_squared)
    top = logsumexp(logits)
    if not np.isfinite(top):
        warnings.warn("all component likelihoods vanished; using uniform posterior",
                      DegeneratePosteriorWarning, stacklevel=2)
        return np.full(weights.shape[0], 1.0 / weights.shape[0])
    post = np.exp(logits - top)
    return post / post.sum()


def log_dets(gmm: Gmm) -> np.ndarray:
    return np.array([log_det_from_cholesky(cholesky(c)) for c in gmm.covariances])


def distances_sq(gmm: Gmm, u) -> np.ndarray:
    return np.array([mahalanobis_sq(gmm.component(j), u) for j in range(gmm.num_components)])


def posterior(gmm: Gmm, u, d_squared=None) -> np.ndarray:
    """p(j | u) for every component.

    ``d_squared`` lets callers reuse distances already computed for judging.
    """
    if gmm.num_components == 0:
        raise InvalidModelError("mixture has no components")
    if d_squared is None:
        d_squared = distances_sq(gmm, u)
    return posterior_from_distances(gmm.weights, log_dets(gmm), d_squared)


# ---------------------------------------------------------------------------
# block structure, conditioning, marginals
# ---------------------------------------------------------------------------


def block_view(comp: GaussianComponent, M: int) -> BlockView:
    cov = comp.covariance
    if cov.shape != (2 * M, 2 * M):
        raise ValueError(f"covariance shape {cov.shape} does not match M={M}")
    c_block = cov[M:, M:]
    try:
        c_inv = inverse(c_block)
    except DegenerateCovarianceError as exc:
        raise DegenerateCovarianceError("forecast block is not positive definite") from exc
    return BlockView(cov[:M, :M].copy(), cov[:M, M:].copy(), c_block.copy(), c_inv)


def condition_centralized(gmm: Gmm, y0) -> Conditional:
    """Condition every power on the full forecast vector ``y0``."""
    M = gmm.num_participants
    y0 = np.asarray(y0, dtype=float)
    if y0.shape != (M,):
        raise ValueError(f"y0 must have length {M}")
    J = gmm.num_components
    lam = np.empty((J, M))
    delta = np.empty((J, M))
    d2 = np.empty(J)
    ldet = np.empty(J)
    for j in range(J):
        blocks = block_view(gmm.component(j), M)
        resid = y0 - gmm.means[j, M:]
        theta = blocks.c_inverse @ resid
        d2[j] = resid @ theta
        ldet[j] = log_det_from_cholesky(cholesky(blocks.c_block))
        lam[j] = gmm.means[j, :M] + blocks.b_block @ theta
        delta[j] = np.diag(blocks.a_block) - np.einsum(
            "mi,ik,mk->m", blocks.b_block, blocks.c_inverse, blocks.b_block
        )
    alpha = posterior_from_distances(gmm.weights, ldet, d2)
    return Conditional(np.repeat(alpha[:, None], M, axis=1), lam, delta, y0.copy())


def marginal(gmm: Gmm, dims) -> Gmm:
    dims = np.atleast_1d(np.asarray(dims, dtype=int))
    if dims.size == 0:
        raise ValueError("dims must be nonempty")
    if dims.min() < 0 or dims.max() >= gmm.dim:
        raise IndexError("dims out of range")
    return Gmm(
        gmm.weights.copy(),
        gmm.means[:, dims],
        gmm.covariances[:, dims[:, None], dims[None, :]],
        gmm.accumulators.copy(),
    )


def _as_mixture1d(params) -> Mixture1D:
    if isinstance(params, Mixture1D):
        return params
    if isinstance(params, Gmm):
        return Mixture1D.from_gmm(params)
    raise TypeError(f"cannot evaluate {type(params).__name__} as a 1-D mixture")


def pdf_1d(params, grid) -> np.ndarray:
    mix = _as_mixture1d(params)
    grid = np.asarray(grid, dtype=float)
    sd = np.sqrt(mix.variances)
    z = (grid[:, None] - mix.means) / sd
    dens = np.exp(-0.5 * z**2) / (sd * np.sqrt(2.0 * np.pi))
    return dens @ mix.weights


def cdf_1d(params, grid) -> np.ndarray:
    mix = _as_mixture1d(params)
    grid = np.asarray(grid, dtype=float)
    z = (grid[:, None] - mix.means) / np.sqrt(mix.variances)
    return ndtr(z) @ mix.weights
