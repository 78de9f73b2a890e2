"""Causally consistent partitioned key-value store: protocol engines, a
deterministic simulator, a trace checker and a closed-loop benchmark."""

from __future__ import annotations

from .bench import Metrics, WorkloadConfig, report, run_experiment, zipf_next
from .checker import check_trace
from .cluster import Cluster, Topology, run_scenario
from .config import ClusterConfig

__all__ = [
    "Cluster",
    "ClusterConfig",
    "Metrics",
    "Topology",
    "WorkloadConfig",
    "check_trace",
    "report",
    "run_experiment",
    "run_scenario",
    "zipf_next",
]
__version__ = "0.1.0"
