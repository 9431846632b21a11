"""Memory-constrained queueing model of LLM inference with a slotted KV-cache simulator."""

from .analysis import capacity_report, classify_stability, measured_rate, plan_gpus
from .cluster import ClusterConfig, run_cluster
from .sim_core import run_replica
from .workload import (
    EmpiricalWorkload,
    MixtureWorkload,
    UniformWorkload,
    WorkloadError,
    expected_footprint,
    lifetime_footprint,
    mixture,
    preset,
)

__version__ = "0.1.0"
