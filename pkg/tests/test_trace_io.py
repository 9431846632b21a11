import io
import json

import numpy as np
import pytest

from kvqueue import analysis, trace_io
from kvqueue.cluster import ClusterConfig, run_cluster
from kvqueue.sim_core import run_replica
from kvqueue.trace_io import (
    BatchTimeTrace,
    RequestTrace,
    ResultBundle,
    TraceError,
    estimate_slot_seconds,
    fit_empirical_pmf,
    load_batch_times,
    load_request_trace,
    write_request_trace,
    write_results,
)
from kvqueue.workload import preset


def test_load_minimal_csv():
    trace = load_request_trace(io.StringIO("prompt_len,output_len\n512,1\n"))
    assert len(trace) == 1
    assert trace.rows() == [(None, 512, 1)]


def test_zero_output_names_the_line():
    with pytest.raises(TraceError, match="line 3"):
        load_request_trace(io.StringIO("prompt_len,output_len\n5,5\n512,0\n"))


def test_bad_values_and_headers():
    with pytest.raises(TraceError, match="line 2"):
        load_request_trace(io.StringIO("prompt_len,output_len\nabc,1\n"))
    with pytest.raises(TraceError, match="header"):
        load_request_trace(io.StringIO("prompt,output\n1,1\n"))
    with pytest.raises(TraceError, match="line 2"):
        load_request_trace(io.StringIO('{"prompt_len": 3, "output_len": 2}\n{oops\n'), format="jsonl")


def test_jsonl_with_arrival_times():
    text = '{"arrival_time": 0.5, "prompt_len": 10, "output_len": 3}\n\n{"arrival_time": 0.1, "prompt_len": 7, "output_len": 2}\n'
    trace = load_request_trace(io.StringIO(text), format="jsonl")
    assert trace.arrival_time == [0.5, 0.1]
    assert trace.sorted_by_arrival().prompt_len == [7, 10]


def test_round_trip(tmp_path):
    trace = RequestTrace([10, 2000, 7], [1, 5, 900], [0.0, 0.25, 1.5])
    path = tmp_path / "t.csv"
    write_request_trace(trace, path)
    back = load_request_trace(path)
    assert back == trace
    plain = RequestTrace([3, 4], [5, 6])
    write_request_trace(plain, tmp_path / "p.csv")
    assert load_request_trace(tmp_path / "p.csv") == plain


def long_context_trace(n=503, seed=0):
    rng = np.random.default_rng(seed)
    return RequestTrace(list(rng.integers(1000, 30000, n)), list(rng.integers(1, 200, n)))


def test_503_row_trace_and_split(tmp_path):
    path = tmp_path / "lb.csv"
    write_request_trace(long_context_trace(), path)
    trace = load_request_trace(path)
    assert len(trace) == 503 and min(trace.prompt_len) >= 1 and min(trace.output_len) >= 1
    pmf, test = fit_empirical_pmf(trace, 0.8, seed=1)
    assert len(test) == 101  # floor(0.8 * 503) = 402 rows train the pmf
    assert sum(p for _, p in pmf.table) == pytest.approx(1.0)


def test_identical_rows_give_point_mass():
    pmf, test = fit_empirical_pmf(RequestTrace([512] * 10, [1] * 10), 0.8)
    assert pmf.table == (((512, 1), 1.0),)
    assert len(test) == 2


def test_split_is_seeded():
    trace = long_context_trace(50)
    a = fit_empirical_pmf(trace, 0.5, seed=4)
    b = fit_empirical_pmf(trace, 0.5, seed=4)
    assert a[0] == b[0] and a[1] == b[1]
    with pytest.raises(ValueError):
        fit_empirical_pmf(trace, 1.0)


def test_estimators():
    assert estimate_slot_seconds(BatchTimeTrace([0.03, 0.0372, 0.05]), "median") == 0.0372
    assert estimate_slot_seconds([0.01] * 9 + [10.0], "trimmed-mean", 0.10) == pytest.approx(0.01)
    assert estimate_slot_seconds([0.04], "median") == 0.04
    with pytest.raises(analysis.InsufficientDataError):
        estimate_slot_seconds([], "median")
    with pytest.raises(ValueError):
        estimate_slot_seconds([1.0], "mode")


def test_batch_time_loader():
    bt = load_batch_times(io.StringIO("batch_seconds\n0.03\n0.05\n"))
    assert bt.batch_seconds == [0.03, 0.05]
    with pytest.raises(TraceError, match="line 2"):
        load_batch_times(io.StringIO("batch_seconds\nfast\n"))
    with pytest.raises(TraceError):
        load_batch_times(io.StringIO("batch_seconds\n-1\n"))


def test_empty_bundle_writes_headers_only(tmp_path):
    manifest = write_results(ResultBundle(), tmp_path)
    assert set(manifest["files"]) == {
        "capacity.json", "measurement.json", "slots.csv", "requests.csv", "queue.csv", "waiting_cdf.csv", "drift.csv"
    }
    header, rows = trace_io.read_csv(tmp_path / "slots.csv")
    assert tuple(header) == trace_io.SLOT_HEADER and rows == []


def bundle_for(run, spec):
    report = analysis.capacity_report(spec, run.memory_limit, run.slot_seconds)
    req = run.requests
    drift = analysis.drift_series(run.slots["outstanding_demand"], run.slots["memory_used"], run.slots["new_demand"])
    return ResultBundle(
        capacity=report,
        measurement={"mu_theory": report.mu_theory},
        config={"seed": 1},
        replicas=[run],
        requests=req,
        queue_len=run.slots["queue_len"],
        waiting_cdf=analysis.waiting_time_cdf(req["arrival_slot"], req["first_service_slot"], run.slot_seconds),
        drift=[drift],
    )


def test_manifest_hashes_and_determinism(tmp_path):
    spec = preset("pd-1-1")
    for name in ("a", "b"):
        run = run_replica(spec, 131000, 4.0, 0.0372, 300, seed=1)
        write_results(bundle_for(run, spec), tmp_path / name)
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    for fname, digest in manifest["files"].items():
        assert trace_io.sha256_file(tmp_path / "a" / fname) == digest
        assert (tmp_path / "a" / fname).read_bytes() == (tmp_path / "b" / fname).read_bytes()
    header, rows = trace_io.read_csv(tmp_path / "a" / "requests.csv")
    assert len(rows) == 300 and header[0] == "id"


def test_cluster_files_carry_replica_column(tmp_path):
    spec = preset("pd-1-1")
    cfg = ClusterConfig(replicas=2, memory_limit=131000, slot_seconds=0.0372)
    out = run_cluster(cfg, spec, 6.0, 200, seed=0)
    write_results(ResultBundle(replicas=out.replicas, requests=out.requests, queue_len=out.queue_len), tmp_path)
    header, rows = trace_io.read_csv(tmp_path / "requests.csv")
    assert header[0] == "replica" and {r[0] for r in rows} == {"0", "1"}


def test_unfinished_requests_write_blank_cells(tmp_path):
    run = run_replica(preset("pd-1-1"), 131000, 50.0, 0.0372, 400, seed=0, slot_cap=100)
    write_results(ResultBundle(requests=run.requests), tmp_path)
    _, rows = trace_io.read_csv(tmp_path / "requests.csv")
    assert any(r[-1] == "" for r in rows)


def test_stream_from_trace():
    trace = RequestTrace([5, 6, 7], [1, 1, 1], [10.0, 10.05, 10.25])
    stream = trace_io.stream_from_trace(trace, 0.1)
    assert list(stream.arrival_slot) == [0, 0, 2]
    with pytest.raises(TraceError):
        trace_io.stream_from_trace(RequestTrace([1], [1]), 0.1)
