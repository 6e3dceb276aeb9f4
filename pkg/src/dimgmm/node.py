"""
Distributed incremental update of the joint mixture and per-node conditionals.

Every participant (node) ``m`` keeps the weights, accumulators and full
covariances of all components but only its own two mean entries
``mu_{j,x_m}`` and ``mu_{j,y_m}``. It sees only its own observation
``(u_{x_m}, u_{y_m})`` and its own conditioning forecast ``y0_m``. All cross-node
quantities travel through consensus phases run by :class:`~dimgmm.netsim.Network`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .consensus import ConsensusConfig, Topology
from .gmm import (
    Gmm,
    Mixture1D,
    cholesky,
    inverse,
    log_det_from_cholesky,
    posterior_from_distances,
    repair_covariance,
)
from .igmm import CREATED, UPDATED, CapacityError, IgmmConfig
from .netsim import SCALAR_SUM, VECTOR_COLLECT, Network

SCALAR = "scalar"
VECTOR = "vector"
STACKED = "stacked"


class IncoherentDecisionError(RuntimeError):
    """Nodes disagreed on whether to update or create."""


@dataclass
class NodeParams:
    index: int
    weights: np.ndarray
    mean_x: np.ndarray
    mean_y: np.ndarray
    covariances: np.ndarray
    accumulators: np.ndarray

    @classmethod
    def from_gmm(cls, gmm: Gmm, m: int) -> "NodeParams":
        M = gmm.num_participants
        return cls(
            index=m,
            weights=gmm.weights.copy(),
            mean_x=gmm.means[:, m].copy(),
            mean_y=gmm.means[:, M + m].copy(),
            covariances=gmm.covariances.copy(),
            accumulators=gmm.accumulators.copy(),
        )

    @property
    def num_components(self) -> int:
        return self.weights.shape[0]

    def to_dict(self) -> dict:
        dim = self.covariances.shape[-1] if self.covariances.size else 0
        return {
            "index": self.index + 1,
            "dim": dim,
            "weights": self.weights.tolist(),
            "own_means": {"x": self.mean_x.tolist(), "y": self.mean_y.tolist()},
            "covariances": [c.reshape(-1).tolist() for c in self.covariances],
            "accumulators": self.accumulators.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NodeParams":
        dim = int(d["dim"])
        covs = np.asarray(d["covariances"], dtype=float).reshape(-1, dim, dim)
        return cls(
            index=int(d["index"]) - 1,
            weights=np.asarray(d["weights"], dtype=float),
            mean_x=np.asarray(d["own_means"]["x"], dtype=float),
            mean_y=np.asarray(d["own_means"]["y"], dtype=float),
            covariances=covs,
            accumulators=np.asarray(d["accumulators"], dtype=float),
        )


@dataclass
class NodeConditional:
    index: int
    alpha: np.ndarray
    lam: np.ndarray
    delta: np.ndarray
    y0: float

    def error_mixture(self) -> Mixture1D:
        return Mixture1D(self.alpha, self.lam - self.y0, self.delta)

    def to_dict(self) -> dict:
        return {
            "index": self.index + 1,
            "y0": self.y0,
            "alpha": self.alpha.tolist(),
            "lambda": self.lam.tolist(),
            "delta": self.delta.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NodeConditional":
        return cls(int(d["index"]) - 1, np.asarray(d["alpha"]), np.asarray(d["lambda"]),
                   np.asarray(d["delta"]), float(d["y0"]))


class MpNode:
    """One participant's private state and local computations."""

    def __init__(self, params: NodeParams, num_nodes: int):
        self.params = params
        self.M = num_nodes
        self._u = None  # (u_x, u_y) of the observation being processed
        self._inv_cache: dict[int, np.ndarray] = {}
        self._post = None
        self._r = None

    @property
    def index(self) -> int:
        return self.params.index

    def observe(self, u_x: float, u_y: float) -> None:
        self._u = (float(u_x), float(u_y))

    def _innovation(self, j: int) -> tuple[float, float]:
        u_x, u_y = self._u
        p = self.params
        return u_x - p.mean_x[j], u_y - p.mean_y[j]

    def _precision(self, j: int) -> np.ndarray:
        if j not in self._inv_cache:
            self._inv_cache[j] = inverse(self.params.covariances[j])
        return self._inv_cache[j]

    def _invalidate(self) -> None:
        self._inv_cache.clear()

    # judging ---------------------------------------------------------------

    def judge_layer1(self, j: int) -> np.ndarray:
        """Contributions ``[l_{x_1}..l_{x_M}, l_{y_1}..l_{y_M}]`` from this node's rows."""
        m, M = self.index, self.M
        prec = self._precision(j)
        dx, dy = self._innovation(j)
        return prec[m] * dx + prec[M + m] * dy

    def judge_layer2(self, j: int, g: np.ndarray) -> float:
        """Own term of the distance given the summed first layer ``g`` (length 2M)."""
        m, M = self.index, self.M
        dx, dy = self._innovation(j)
        return float(g[m] * dx + g[M + m] * dy)

    # updating ----------------------------------------------------------------

    def begin_update(self, d_squared: np.ndarray) -> None:
        p = self.params
        ldets = np.array([log_det_from_cholesky(cholesky(c)) for c in p.covariances])
        self._post = posterior_from_distances(p.weights, ldets, d_squared)
        self._h = p.accumulators + self._post
        self._r = self._post / self._h

    def update_pieces(self, j: int):
        """Return ``(eps, scaled_old_cov, (xi_x, xi_y))`` for component ``j``."""
        r = self._r[j]
        eps = r * (1.0 + r * r - 3.0 * r)
        scaled = (1.0 - r) * self.params.covariances[j]
        return eps, scaled, self._innovation(j)

    def apply_covariance(self, j: int, eps: float, scaled: np.ndarray, xi: np.ndarray) -> None:
        self.params.covariances[j] = repair_covariance(scaled + eps * np.outer(xi, xi))

    def finish_update(self) -> None:
        p = self.params
        dx = np.array([self._innovation(j)[0] for j in range(p.num_components)])
        dy = np.array([self._innovation(j)[1] for j in range(p.num_components)])
        p.mean_x = p.mean_x + self._r * dx
        p.mean_y = p.mean_y + self._r * dy
        p.accumulators = self._h
        p.weights = self._h / self._h.sum()
        self._post = self._r = None
        self._invalidate()

    @property
    def last_posterior(self):
        return self._post

    # creating ---------------------------------------------------------------

    def create(self, cov0: np.ndarray, cfg: IgmmConfig) -> None:
        p = self.params
        u_x, u_y = self._u
        J = p.num_components
        if cfg.max_components is not None and J >= cfg.max_components:
            if cfg.on_capacity == "error":
                raise CapacityError(f"mixture already has {J} components")
            k = int(np.argmin(p.accumulators))
            p.accumulators = p.accumulators.copy()
            p.accumulators[k] = 1.0
            p.mean_x[k], p.mean_y[k] = u_x, u_y
            p.covariances[k] = cov0
        else:
            p.accumulators = np.append(p.accumulators, 1.0)
            p.mean_x = np.append(p.mean_x, u_x)
            p.mean_y = np.append(p.mean_y, u_y)
            p.covariances = np.concatenate([p.covariances, cov0[None]], axis=0)
        p.weights = p.accumulators / p.accumulators.sum()
        self._invalidate()

    # deriving ---------------------------------------------------------------

    def _forecast_block(self, j: int):
        M = self.M
        c_block = self.params.covariances[j][M:, M:]
        chol = cholesky(c_block)
        return c_block, inverse(c_block), log_det_from_cholesky(chol)

    def derive_layer1(self, j: int, y0_m: float) -> np.ndarray:
        """``rho_{y_m, y_i} (y0_m - mu_{j,y_m})`` for every ``i``."""
        _, c_inv, _ = self._forecast_block(j)
        return c_inv[self.index] * (y0_m - self.params.mean_y[j])

    def derive_layer2(self, j: int, theta: np.ndarray, y0_m: float) -> float:
        return float(theta[self.index] * (y0_m - self.params.mean_y[j]))

    def finish_derive(self, d_squared: np.ndarray, thetas: np.ndarray, y0_m: float) -> NodeConditional:
        """Local weights, means and variances from the summed quantities.

        ``thetas`` has shape (J, M): this node's estimate of ``C_j^{-1}(y0 - mu_{j,y})``.
        """
        p, m, M = self.params, self.index, self.M
        J = p.num_components
        ldets = np.empty(J)
        lam = np.empty(J)
        delta = np.empty(J)
        for j in range(J):
            cov = p.covariances[j]
            _, c_inv, ldets[j] = self._forecast_block(j)
            b_row = cov[m, M:]
            lam[j] = p.mean_x[j] + b_row @ thetas[j]
            delta[j] = cov[m, m] - b_row @ c_inv @ b_row
        alpha = posterior_from_distances(p.weights, ldets, d_squared)
        return NodeConditional(m, alpha, lam, delta, float(y0_m))


@dataclass
class SchemeConfig:
    igmm: IgmmConfig = field(default_factory=IgmmConfig)
    consensus: ConsensusConfig = field(default_factory=ConsensusConfig)
    batching: str = SCALAR
    record_messages: bool = False

    def __post_init__(self):
        if self.batching not in (SCALAR, VECTOR, STACKED):
            raise ValueError(f"unknown batching {self.batching!r}")


@dataclass
class DistributedOutcome:
    kind: str
    d_squared: np.ndarray  # (M nodes, J) distances as seen by each node
    accepted: np.ndarray  # verdict per node


class DistributedScheme:
    """Simulates all participants running the distributed update and derivation.

    The harness hands node ``m`` only ``u[m]`` and ``u[M + m]``; everything
    else a node learns arrives through the network.
    """

    def __init__(self, model: Gmm, topology: Topology, cfg: Optional[SchemeConfig] = None):
        self.cfg = cfg or SchemeConfig()
        self.M = model.num_participants
        if topology.num_nodes != self.M:
            raise ValueError(f"topology has {topology.num_nodes} nodes, model has {self.M} participants")
        self.topology = topology
        self.network = Network(topology, self.cfg.consensus, record=self.cfg.record_messages)
        self.nodes = [MpNode(NodeParams.from_gmm(model, m), self.M) for m in range(self.M)]

    @classmethod
    def from_params(cls, params: list[NodeParams], topology: Topology, cfg: Optional[SchemeConfig] = None):
        obj = cls.__new__(cls)
        obj.cfg = cfg or SchemeConfig()
        obj.M = len(params)
        obj.topology = topology
        obj.network = Network(topology, obj.cfg.consensus, record=obj.cfg.record_messages)
        obj.nodes = [MpNode(p, obj.M) for p in sorted(params, key=lambda p: p.index)]
        return obj

    @property
    def stats(self):
        return self.network.stats

    @property
    def num_components(self) -> int:
        counts = {n.params.num_components for n in self.nodes}
        if len(counts) != 1:
            raise IncoherentDecisionError(f"nodes hold different component counts {sorted(counts)}")
        return counts.pop()

    def _global_sum(self, inputs: np.ndarray) -> np.ndarray:
        """Sum per-node rows of shape (M, ...) with the configured batching."""
        if self.cfg.batching == SCALAR and inputs.ndim > 1:
            flat = inputs.reshape(self.M, -1)
            out = np.empty_like(flat)
            for k in range(flat.shape[1]):
                out[:, k] = self.network.run_phase(flat[:, k], SCALAR_SUM)
            return out.reshape(inputs.shape)
        return self.network.run_phase(inputs, SCALAR_SUM)

    def _distribute(self, u) -> None:
        u = np.asarray(u, dtype=float)
        for n in self.nodes:
            n.observe(u[n.index], u[self.M + n.index])

    # judging ---------------------------------------------------------------

    def judge(self, u) -> DistributedOutcome:
        self._distribute(u)
        J = self.num_components
        M = self.M
        d2 = np.zeros((M, J))
        if J == 0:
            return DistributedOutcome(CREATED, d2, np.zeros(M, dtype=bool))
        if self.cfg.batching == STACKED:
            first = np.stack([[n.judge_layer1(j) for j in range(J)] for n in self.nodes])
            g = self._global_sum(first)  # (M, J, 2M)
            second = np.array([[n.judge_layer2(j, g[n.index, j]) for j in range(J)] for n in self.nodes])
            d2 = self._global_sum(second)
        else:
            for j in range(J):
                first = np.stack([n.judge_layer1(j) for n in self.nodes])
                g = self._global_sum(first)
                second = np.array([n.judge_layer2(j, g[n.index]) for n in self.nodes])
                d2[:, j] = self._global_sum(second)
        threshold = self.cfg.igmm.threshold(2 * M)
        accepted = np.any(d2 <= threshold, axis=1)
        if accepted.any() and not accepted.all():
            raise IncoherentDecisionError("nodes reached different judging verdicts")
        return DistributedOutcome(UPDATED if accepted[0] else CREATED, d2, accepted)

    # updating ----------------------------------------------------------------

    def update(self, d_squared: np.ndarray) -> None:
        """Apply the updating branch; ``d_squared`` holds each node's distances."""
        J = self.num_components
        for n in self.nodes:
            n.begin_update(d_squared[n.index])
        if self.cfg.batching == STACKED:
            pieces = [[n.update_pieces(j) for j in range(J)] for n in self.nodes]
            entries = np.array([[pc[j][2] for j in range(J)] for pc in pieces])  # (M, J, 2)
            xi = self.network.run_phase(np.transpose(entries, (0, 2, 1)), VECTOR_COLLECT)  # (M, 2M, J)
            for n, pc in zip(self.nodes, pieces):
                for j in range(J):
                    eps, scaled, _ = pc[j]
                    n.apply_covariance(j, eps, scaled, xi[n.index, :, j])
        else:
            for j in range(J):
                pieces = [n.update_pieces(j) for n in self.nodes]
                entries = np.array([pc[2] for pc in pieces])  # (M, 2)
                xi = self.network.run_phase(entries, VECTOR_COLLECT)
                for n, (eps, scaled, _) in zip(self.nodes, pieces):
                    n.apply_covariance(j, eps, scaled, xi[n.index])
        for n in self.nodes:
            n.finish_update()

    def create(self) -> None:
        cov0 = self.cfg.igmm.initial_matrix(2 * self.M)
        for n in self.nodes:
            n.create(cov0.copy(), self.cfg.igmm)

    def update_step(self, u) -> DistributedOutcome:
        """Judge ``u`` and then update or create at every node."""
        start = time.perf_counter()
        outcome = self.judge(u)
        if outcome.kind == UPDATED:
            self.update(outcome.d_squared)
        else:
            self.create()
        self.stats.wall_time_per_update.append(time.perf_counter() - start)
        return outcome

    # deriving ---------------------------------------------------------------

    def derive(self, y0) -> list[NodeConditional]:
        """Every node's conditional of its own forecast error given ``y0``.

        Node ``m`` is handed only ``y0[m]``.
        """
        y0 = np.asarray(y0, dtype=float)
        J, M = self.num_components, self.M
        own = {n.index: float(y0[n.index]) for n in self.nodes}
        if self.cfg.batching == STACKED:
            first = np.stack([[n.derive_layer1(j, own[n.index]) for j in range(J)] for n in self.nodes])
            thetas = self._global_sum(first)  # (M, J, M)
            second = np.array([[n.derive_layer2(j, thetas[n.index, j], own[n.index]) for j in range(J)]
                               for n in self.nodes])
            d2 = self._global_sum(second)
        else:
            thetas = np.zeros((M, J, M))
            d2 = np.zeros((M, J))
            for j in range(J):
                first = np.stack([n.derive_layer1(j, own[n.index]) for n in self.nodes])
                thetas[:, j] = self._global_sum(first)
                second = np.array([n.derive_layer2(j, thetas[n.index, j], own[n.index]) for n in self.nodes])
                d2[:, j] = self._global_sum(second)
        return [n.finish_derive(d2[n.index], thetas[n.index], own[n.index]) for n in self.nodes]

    def step(self, u, y0=None):
        """Update with ``u`` and, if ``y0`` is given, derive the conditionals."""
        outcome = self.update_step(u)
        conds = self.derive(y0) if y0 is not None else None
        return outcome, conds

    # harness-side views ------------------------------------------------------

    def snapshots(self) -> list[dict]:
        return [n.params.to_dict() for n in self.nodes]

    def collected_means(self) -> np.ndarray:
        """Gather every node's private means into full (J, 2M) vectors.

        Only for verification; nodes never do this themselves.
        """
        J, M = self.num_components, self.M
        means = np.empty((J, 2 * M))
        for n in self.nodes:
            means[:, n.index] = n.params.mean_x
            means[:, M + n.index] = n.params.mean_y
        return means

    def reassemble(self, k: int = 0) -> Gmm:
        """Node ``k``'s shared parameters combined with the collected means."""
        p = self.nodes[k].params
        return Gmm(p.weights.copy(), self.collected_means(), p.covariances.copy(), p.accumulators.copy())

    def disagreement(self) -> float:
        """Largest absolute difference of any shared parameter between nodes."""
        ref = self.nodes[0].params
        worst = 0.0
        for n in self.nodes[1:]:
            p = n.params
            for a, b in ((p.weights, ref.weights), (p.accumulators, ref.accumulators),
                         (p.covariances, ref.covariances)):
                if a.shape != b.shape:
                    return np.inf
                if a.size:
                    worst = max(worst, float(np.max(np.abs(a - b))))
        return worst


def reassemble_from_snapshots(params: list[NodeParams], k: int = 0) -> Gmm:
    params = sorted(params, key=lambda p: p.index)
    M = len(params)
    ref = params[k]
    J = ref.num_components
    means = np.empty((J, 2 * M))
    for p in params:
        means[:, p.index] = p.mean_x
        means[:, M + p.index] = p.mean_y
    return Gmm(ref.weights.copy(), means, ref.covariances.copy(), ref.accumulators.copy())
