"""Distributed incremental Gaussian mixture modelling of wind power forecast errors."""

__version__ = "0.1.0"

from .consensus import ConsensusConfig, Topology, build_topology, nine_node_topology
from .em import EmConfig, fit_em
from .gmm import Conditional, Gmm, Mixture1D, condition_centralized
from .igmm import IgmmConfig, igmm_step, run_igmm
from .node import DistributedScheme, SchemeConfig

__all__ = [
    "Conditional",
    "ConsensusConfig",
    "DistributedScheme",
    "EmConfig",
    "Gmm",
    "IgmmConfig",
    "Mixture1D",
    "SchemeConfig",
    "Topology",
    "build_topology",
    "condition_centralized",
    "fit_em",
    "igmm_step",
    "nine_node_topology",
    "run_igmm",
]
