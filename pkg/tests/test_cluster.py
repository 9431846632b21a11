import numpy as np
import pytest

from kvqueue.cluster import ClusterConfig, route, run_cluster
from kvqueue.sim_core import run_replica
from kvqueue.workload import preset

B = 0.0372


def test_route_examples():
    assert route(0, 8) == 0
    assert route(9, 8) == 1
    assert route(7, 1) == 0
    with pytest.raises(ValueError):
        route(3, 0)


def test_single_replica_matches_run_replica():
    spec = preset("pd-1-1")
    cfg = ClusterConfig(replicas=1, memory_limit=131000, slot_seconds=B)
    out = run_cluster(cfg, spec, 4.0, 800, seed=9)
    solo = run_replica(spec, 131000, 4.0, B, 800, seed=9)
    for key in solo.requests:
        assert np.array_equal(out.requests[key], solo.requests[key])
    assert np.array_equal(out.queue_len, solo.slots["queue_len"])
    assert out.status == solo.status


def test_round_robin_balance_and_conservation():
    cfg = ClusterConfig(replicas=4, memory_limit=131000, slot_seconds=B)
    out = run_cluster(cfg, preset("pd-1-1"), 12.0, 1003, seed=2)
    per = np.bincount(out.requests["replica"], minlength=4)
    assert per.max() - per.min() <= 1
    assert out.completed == 1003 == out.requested
    assert out.status == "drained"
    assert np.array_equal(out.requests["id"], np.arange(1003))
    assert (out.requests["replica"] == out.requests["id"] % 4).all()
    assert out.queue_len.sum() == sum(r.slots["queue_len"].sum() for r in out.replicas)


def test_config_validation():
    with pytest.raises(ValueError):
        ClusterConfig(replicas=0, memory_limit=10, slot_seconds=1.0)
    with pytest.raises(ValueError):
        ClusterConfig(replicas=2, memory_limit=10, slot_seconds=1.0, routing="random")
