"""
Average consensus on an undirected graph.

Each round node ``m`` moves towards its neighbours,
``x_m <- x_m + sum_i zeta_mi (x_i - x_m)`` with ``zeta_mi = 2 / (D_m + D_i + 1)``.
Two patterns are built on top: a global sum (``M`` times the converged
average) and a vector collection where each node seeds only its own two slots.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

log = logging.getLogger(__name__)

ORACLE_STOP = "oracle-stop"
FIXED_ROUNDS = "fixed-rounds"

# Stand-in for the nine-participant communication graph: a ring with two chords.
NINE_NODE_EDGES = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 7), (7, 8), (8, 0), (0, 4), (2, 6)]


class TopologyError(ValueError):
    pass


class ConsensusError(RuntimeError):
    def __init__(self, message: str, residual: float, rounds: int):
        super().__init__(f"{message} (residual {residual:.3e} after {rounds} rounds)")
        self.residual = residual
        self.rounds = rounds


@dataclass
class Topology:
    num_nodes: int
    edges: list[tuple[int, int]]
    neighbors: list[np.ndarray]
    degrees: np.ndarray
    coefficients: np.ndarray  # zeta, zero off the edge set and on the diagonal
    scheme: str = "degree"
    _step: Optional[np.ndarray] = field(default=None, init=False, repr=False, compare=False)

    @property
    def self_weights(self) -> np.ndarray:
        return 1.0 - self.coefficients.sum(axis=1)

    @property
    def weight_matrix(self) -> np.ndarray:
        return self.coefficients + np.diag(self.self_weights)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def spectral_gap_radius(self) -> float:
        """Spectral radius of ``W - 11^T/M`` (the per-round contraction)."""
        M = self.num_nodes
        if M == 1:
            return 0.0
        vals = np.linalg.eigvalsh(self.weight_matrix - np.full((M, M), 1.0 / M))
        return float(np.max(np.abs(vals)))

    def step_matrix(self) -> np.ndarray:
        """``zeta - diag(rowsum zeta)``; a round is ``x + step_matrix @ x``."""
        if self._step is None:
            self._step = self.coefficients - np.diag(self.coefficients.sum(axis=1))
        return self._step

    def to_dict(self) -> dict:
        return {"nodes": self.num_nodes, "edges": [[a + 1, b + 1] for a, b in self.edges]}


def _degree_coefficients(M, edges, degrees):
    zeta = np.zeros((M, M))
    for a, b in edges:
        zeta[a, b] = zeta[b, a] = 2.0 / (degrees[a] + degrees[b] + 1)
    return zeta


def _metropolis_coefficients(M, edges, degrees):
    zeta = np.zeros((M, M))
    for a, b in edges:
        zeta[a, b] = zeta[b, a] = min(1.0 / (degrees[a] + 1), 1.0 / (degrees[b] + 1))
    return zeta


def build_topology(edges: Sequence[Sequence[int]], num_nodes: int) -> Topology:
    """Validate a 0-based edge list and compute the adjacency coefficients.

    If the default coefficients leave some node with a negative self weight
    (or fail to contract) the graph falls back to Metropolis weights, with a
    warning.
    """
    if num_nodes < 1:
        raise TopologyError("need at least one node")
    seen = set()
    clean = []
    for e in edges:
        a, b = int(e[0]), int(e[1])
        if not (0 <= a < num_nodes and 0 <= b < num_nodes):
            raise TopologyError(f"edge {(a, b)} references a missing node")
        if a == b:
            raise TopologyError(f"self-loop on node {a}")
        key = (min(a, b), max(a, b))
        if key in seen:
            raise TopologyError(f"duplicate edge {key}")
        seen.add(key)
        clean.append(key)
    if num_nodes > 1:
        rows = [a for a, b in clean] + [b for a, b in clean]
        cols = [b for a, b in clean] + [a for a, b in clean]
        adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(num_nodes, num_nodes))
        n_comp, _ = connected_components(adj, directed=False)
        if n_comp != 1:
            raise TopologyError(f"graph is disconnected ({n_comp} components)")
    degrees = np.zeros(num_nodes, dtype=int)
    neighbors: list[list[int]] = [[] for _ in range(num_nodes)]
    for a, b in clean:
        degrees[a] += 1
        degrees[b] += 1
        neighbors[a].append(b)
        neighbors[b].append(a)

    zeta = _degree_coefficients(num_nodes, clean, degrees)
    topo = Topology(num_nodes, clean, [np.array(sorted(n), dtype=int) for n in neighbors], degrees, zeta)
    if np.any(topo.self_weights < -1e-12) or topo.spectral_gap_radius() >= 1.0:
        log.warning("adjacency coefficients give a negative self weight or no contraction; "
                    "using Metropolis weights")
        topo.coefficients = _metropolis_coefficients(num_nodes, clean, degrees)
        topo.scheme = "metropolis"
    if topo.spectral_gap_radius() >= 1.0:
        raise TopologyError("consensus weight matrix does not contract")
    return topo


def nine_node_topology() -> Topology:
    return build_topology(NINE_NODE_EDGES, 9)


def load_topology(path) -> Topology:
    """Read ``{"nodes": M, "edges": [[a, b], ...]}`` with 1-based ids."""
    doc = json.loads(Path(path).read_text())
    return topology_from_dict(doc)


def topology_from_dict(doc: dict) -> Topology:
    M = int(doc["nodes"])
    edges = [(int(a) - 1, int(b) - 1) for a, b in doc["edges"]]
    return build_topology(edges, M)


def save_topology(topo: Topology, path) -> None:
    Path(path).write_text(json.dumps(topo.to_dict(), indent=2))


@dataclass
class ConsensusConfig:
    tolerance: float = 1e-12
    max_rounds: int = 100_000
    mode: str = ORACLE_STOP

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.mode not in (ORACLE_STOP, FIXED_ROUNDS):
            raise ValueError(f"unknown consensus mode {self.mode!r}")


def consensus_round(topology: Topology, values: np.ndarray) -> np.ndarray:
    """One synchronous round. ``values`` has one row per node."""
    x = np.asarray(values, dtype=float)
    flat = x.reshape(topology.num_nodes, -1)
    out = flat + topology.step_matrix() @ flat
    return out.reshape(x.shape)


def fixed_round_count(topology: Topology, tolerance: float) -> int:
    lam = topology.spectral_gap_radius()
    if lam <= 0.0:
        return 1 if topology.num_nodes > 1 else 0
    return max(1, math.ceil(math.log(tolerance) / math.log(lam)))


def average(
    topology: Topology,
    initial: np.ndarray,
    cfg: ConsensusConfig,
    observer: Optional[Callable[[int, np.ndarray], None]] = None,
) -> tuple[np.ndarray, int]:
    """Run consensus from ``initial`` until the stopping rule fires.

    In oracle-stop mode the run ends once the largest per-round change over all
    nodes drops below ``tolerance * max|initial|``. ``observer(t, x)`` is
    called with the values every node publishes in round ``t``.
    """
    x = np.array(initial, dtype=float)
    if x.shape[0] != topology.num_nodes:
        raise ValueError(f"expected {topology.num_nodes} rows, got {x.shape[0]}")
    scale = float(np.max(np.abs(x))) if x.size else 0.0
    if topology.num_nodes == 1 or scale == 0.0:
        return x, 0

    if cfg.mode == FIXED_ROUNDS:
        rounds = fixed_round_count(topology, cfg.tolerance)
        for t in range(rounds):
            if observer is not None:
                observer(t, x)
            x = consensus_round(topology, x)
        return x, rounds

    threshold = cfg.tolerance * scale
    change = np.inf
    for t in range(cfg.max_rounds):
        if observer is not None:
            observer(t, x)
        nxt = consensus_round(topology, x)
        change = float(np.max(np.abs(nxt - x)))
        x = nxt
        if change < threshold:
            return x, t + 1
    raise ConsensusError("consensus did not converge", change / scale, cfg.max_rounds)


def global_sum(topology: Topology, locals_: np.ndarray, cfg: ConsensusConfig, observer=None):
    """Every node's estimate of ``sum_m L_m``; returns ``(estimates, rounds)``."""
    avg, rounds = average(topology, locals_, cfg, observer)
    return topology.num_nodes * avg, rounds


def sparse_inputs(entries: np.ndarray) -> np.ndarray:
    """Seed vectors for collection: node ``m`` fills slots ``m`` and ``m + M``.

    ``entries`` has shape (M, 2, ...); trailing axes are carried along, so
    several vectors can be collected in one phase.
    """
    entries = np.asarray(entries, dtype=float)
    M = entries.shape[0]
    if entries.shape[1] != 2:
        raise ValueError("each node contributes exactly two entries")
    q0 = np.zeros((M, 2 * M) + entries.shape[2:])
    idx = np.arange(M)
    q0[idx, idx] = entries[:, 0]
    q0[idx, idx + M] = entries[:, 1]
    return q0


def vector_collect(topology: Topology, entries: np.ndarray, cfg: ConsensusConfig, observer=None):
    """Every node's estimate of ``[R_1 .. R_2M]``; returns ``(vectors, rounds)``."""
    return global_sum(topology, sparse_inputs(entries), cfg, observer)
