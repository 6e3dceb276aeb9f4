"""Round-based network fabric that executes consensus phases and keeps count."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .consensus import ConsensusConfig, Topology, global_sum, vector_collect

SCALAR_SUM = "scalar-sum"
VECTOR_COLLECT = "vector-collect"

# message kinds: running sums G and collection vectors Q
_KIND = {SCALAR_SUM: "G", VECTOR_COLLECT: "Q"}


@dataclass(frozen=True)
class Message:
    phase: int
    round: int
    src: int
    dst: int
    kind: str
    payload: tuple


@dataclass
class SimStats:
    rounds_per_consensus: list = field(default_factory=list)
    messages_total: int = 0
    scalars_total: int = 0
    wall_time_per_update: list = field(default_factory=list)

    @property
    def phases(self) -> int:
        return len(self.rounds_per_consensus)

    @property
    def rounds_total(self) -> int:
        return int(sum(self.rounds_per_consensus))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phases"] = self.phases
        d["rounds_total"] = self.rounds_total
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


class Network:
    """Hosts the consensus phases of one simulation run.

    A round is a barrier: every node publishes its current value to each
    neighbour, then all nodes update together. With ``record=True`` every
    message is kept in :attr:`log` so tests can inspect what was exchanged.
    """

    def __init__(self, topology: Topology, cfg: Optional[ConsensusConfig] = None, record: bool = False):
        self.topology = topology
        self.cfg = cfg or ConsensusConfig()
        self.record = record
        self.stats = SimStats()
        self.log: list[Message] = []
        self._directed = [(a, b) for a, b in topology.edges] + [(b, a) for a, b in topology.edges]

    def _observer(self, phase: int, kind: str):
        def observe(t, x):
            flat = x.reshape(x.shape[0], -1)
            for src, dst in self._directed:
                self.log.append(Message(phase, t, src, dst, kind, tuple(flat[src].tolist())))

        return observe

    def run_phase(self, inputs: np.ndarray, kind: str = SCALAR_SUM) -> np.ndarray:
        """Run one consensus phase and return every node's output.

        ``scalar-sum`` inputs have one row per node (scalars or stacked
        scalars); ``vector-collect`` inputs have shape (M, 2, ...) holding each
        node's two own entries.
        """
        if kind not in _KIND:
            raise ValueError(f"unknown phase kind {kind!r}")
        phase = self.stats.phases
        observer = self._observer(phase, _KIND[kind]) if self.record else None
        if kind == SCALAR_SUM:
            out, rounds = global_sum(self.topology, inputs, self.cfg, observer)
        else:
            out, rounds = vector_collect(self.topology, inputs, self.cfg, observer)
        width = int(np.prod(out.shape[1:])) if out.ndim > 1 else 1
        n_msgs = rounds * 2 * self.topology.num_edges
        self.stats.rounds_per_consensus.append(rounds)
        self.stats.messages_total += n_msgs
        self.stats.scalars_total += n_msgs * width
        return out


def run_phase(topology: Topology, inputs, kind: str = SCALAR_SUM, cfg: Optional[ConsensusConfig] = None):
    """Stand-alone phase; returns ``(outputs, stats)``."""
    net = Network(topology, cfg)
    out = net.run_phase(np.asarray(inputs, dtype=float), kind)
    return out, net.stats
