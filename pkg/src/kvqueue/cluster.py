"""Identical replicas behind a stateless round-robin router."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .sim_core import (
    POLICIES,
    PROCESS_KINDS,
    SWAP_MODES,
    ReplicaRun,
    RequestStream,
    default_slot_cap,
    generate_stream,
    simulate_stream,
)
from .workload import WorkloadSpec

ROUTINGS = ("round-robin",)


@dataclass(frozen=True)
class ClusterConfig:
    replicas: int
    memory_limit: int
    slot_seconds: float
    routing: str = "round-robin"
    policy: str = "fcfs"
    process_kind: str = "poisson"
    swap: str = "free"
    slot_cap: Optional[int] = None
    track_demand: bool = True

    def __post_init__(self) -> None:
        if self.replicas < 1:
            raise ValueError(f"need at least one replica, got {self.replicas}")
        if self.routing not in ROUTINGS:
            raise ValueError(f"routing must be one of {ROUTINGS}, got {self.routing!r}")
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if self.process_kind not in PROCESS_KINDS:
            raise ValueError(f"process_kind must be one of {PROCESS_KINDS}, got {self.process_kind!r}")
        if self.swap not in SWAP_MODES:
            raise ValueError(f"swap must be one of {SWAP_MODES}, got {self.swap!r}")


@dataclass
class ClusterOutcome:
    replicas: List[ReplicaRun]
    requests: dict
    queue_len: np.ndarray
    slot_seconds: float
    requested: int
    statuses: List[str] = field(default_factory=list)

    @property
    def status(self) -> str:
        for bad in ("deadlocked", "capped"):
            if bad in self.statuses:
                return bad
        return "drained"

    @property
    def completed(self) -> int:
        return int((self.requests["completion_slot"] >= 0).sum())

    @property
    def arrival_horizon(self) -> int:
        arr = self.requests["arrival_slot"]
        return int(arr[-1]) + 1 if len(arr) else 0


def route(request_ordinal: int, replicas: int) -> int:
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    return request_ordinal % replicas


def run_stream(cfg: ClusterConfig, stream: RequestStream, chunk: int) -> ClusterOutcome:
    """Split one global stream round-robin and run every replica on its share."""
    n = len(stream)
    owner = np.arange(n, dtype=np.int64) % cfg.replicas
    runs = []
    for rep in range(cfg.replicas):
        idx = np.flatnonzero(owner == rep)
        sub = stream.subset(idx)
        runs.append(
            simulate_stream(
                sub,
                cfg.memory_limit,
                chunk,
                cfg.slot_seconds,
                cfg.policy,
                cfg.swap,
                cfg.slot_cap,
                cfg.track_demand,
            )
        )
    merged = {
        key: np.empty(n, dtype=np.int64)
        for key in ("id", "s", "o", "arrival_slot", "first_service_slot", "completion_slot", "replica")
    }
    for rep, run in enumerate(runs):
        idx = np.flatnonzero(owner == rep)
        for key, col in run.requests.items():
            merged[key][idx] = idx if key == "id" else col
        merged["replica"][idx] = rep
    horizon = max((r.num_slots for r in runs), default=0)
    queue = np.zeros(horizon, dtype=np.int64)
    for run in runs:
        queue[: run.num_slots] += run.slots["queue_len"]
    statuses = [r.status for r in runs]
    if n < stream.requested and "capped" not in statuses:
        statuses.append("capped")
    return ClusterOutcome(runs, merged, queue, cfg.slot_seconds, stream.requested, statuses)


def run_cluster(
    cfg: ClusterConfig,
    spec: WorkloadSpec,
    lam: float,
    total_requests: int,
    seed: int = 0,
) -> ClusterOutcome:
    """Global arrival stream at rate ``lam``, routed round-robin over ``cfg.replicas``."""
    cap = cfg.slot_cap
    if cap is None:
        cap = default_slot_cap(total_requests, lam, cfg.slot_seconds)
        cfg = ClusterConfig(**{**cfg.__dict__, "slot_cap": cap})
    stream = generate_stream(spec, lam, cfg.slot_seconds, total_requests, cfg.process_kind, seed, cap)
    return run_stream(cfg, stream, spec.chunk_size)
