"""Trace ingestion, empirical fits and result files."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import analysis
from .workload import EmpiricalWorkload

REQUEST_HEADER = ("arrival_time", "prompt_len", "output_len")
BATCH_HEADER = ("batch_seconds",)

SLOT_HEADER = ("slot", "memory_used", "occupancy", "queue_len", "in_progress", "arrivals", "completions")
REQUESTS_HEADER = ("id", "s", "o", "arrival_slot", "first_service_slot", "completion_slot")
QUEUE_HEADER = ("slot", "queue_len")
CDF_HEADER = ("wait_seconds", "cumulative_fraction")
DRIFT_HEADER = ("slot", "outstanding_demand", "memory_used", "new_demand", "residual")

PathOrStream = Union[str, os.PathLike, IO[str]]


class TraceError(ValueError):
    """Malformed trace input; the message names the offending line or row."""


@dataclass
class RequestTrace:
    prompt_len: List[int]
    output_len: List[int]
    arrival_time: Optional[List[float]] = None

    def __post_init__(self) -> None:
        if len(self.prompt_len) != len(self.output_len):
            raise TraceError("prompt_len and output_len columns differ in length")
        if self.arrival_time is not None and len(self.arrival_time) != len(self.prompt_len):
            raise TraceError("arrival_time column differs in length")
        for row, (s, o) in enumerate(zip(self.prompt_len, self.output_len)):
            if s < 1 or o < 1:
                raise TraceError(f"row {row}: token counts must be >= 1 (prompt_len={s}, output_len={o})")

    def __len__(self) -> int:
        return len(self.prompt_len)

    def rows(self) -> List[Tuple[Optional[float], int, int]]:
        times = self.arrival_time or [None] * len(self)
        return list(zip(times, self.prompt_len, self.output_len))

    def sorted_by_arrival(self) -> "RequestTrace":
        if self.arrival_time is None:
            return self
        order = sorted(range(len(self)), key=lambda i: (self.arrival_time[i], i))
        return RequestTrace(
            [self.prompt_len[i] for i in order],
            [self.output_len[i] for i in order],
            [self.arrival_time[i] for i in order],
        )


@dataclass
class BatchTimeTrace:
    batch_seconds: List[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        for row, x in enumerate(self.batch_seconds):
            if not (x > 0 and math.isfinite(x)):
                raise TraceError(f"row {row}: batch_seconds must be positive, got {x}")


def _open(src: PathOrStream):
    if hasattr(src, "read"):
        return _Borrowed(src)
    return open(src, newline="", encoding="utf-8")


class _Borrowed:
    """Context manager that leaves a caller-owned stream open."""

    def __init__(self, stream):
        self.stream = stream

    def __enter__(self):
        return self.stream

    def __exit__(self, *exc):
        return False


def _parse_int(value, line: int, name: str) -> int:
    try:
        f = float(value)
    except (TypeError, ValueError):
        raise TraceError(f"line {line}: {name}={value!r} is not a number") from None
    if not f.is_integer():
        raise TraceError(f"line {line}: {name}={value!r} is not a whole token count")
    return int(f)


def _parse_float(value, line: int, name: str) -> float:
    try:
        f = float(value)
    except (TypeError, ValueError):
        raise TraceError(f"line {line}: {name}={value!r} is not a number") from None
    if not math.isfinite(f):
        raise TraceError(f"line {line}: {name} must be finite")
    return f


def _guess_format(src: PathOrStream) -> str:
    name = str(getattr(src, "name", src))
    return "jsonl" if name.endswith((".jsonl", ".ndjson")) else "csv"


def load_request_trace(src: PathOrStream, format: Optional[str] = None) -> RequestTrace:
    """Read ``arrival_time,prompt_len,output_len`` rows (arrival_time optional).

    ``format`` is ``"csv"`` or ``"jsonl"``; by default it follows the file suffix.
    """
    fmt = format or _guess_format(src)
    raw: List[Tuple[int, dict]] = []
    with _open(src) as fh:
        if fmt == "csv":
            reader = csv.DictReader(fh)
            fields = reader.fieldnames or []
            missing = {"prompt_len", "output_len"} - set(fields)
            if missing:
                raise TraceError(f"line 1: header lacks {sorted(missing)} (got {fields})")
            for rec in reader:
                raw.append((reader.line_num, rec))
        elif fmt == "jsonl":
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise TraceError(f"line {line_no}: invalid JSON ({exc.msg})") from None
                if not isinstance(rec, dict):
                    raise TraceError(f"line {line_no}: expected a JSON object")
                raw.append((line_no, rec))
        else:
            raise TraceError(f"unknown trace format {fmt!r}; use csv or jsonl")

    prompts, outputs, times = [], [], []
    has_time = bool(raw) and all(rec.get("arrival_time") not in (None, "") for _, rec in raw)
    for line_no, rec in raw:
        for name in ("prompt_len", "output_len"):
            if rec.get(name) in (None, ""):
                raise TraceError(f"line {line_no}: missing {name}")
        prompts.append(_parse_int(rec["prompt_len"], line_no, "prompt_len"))
        outputs.append(_parse_int(rec["output_len"], line_no, "output_len"))
        if prompts[-1] < 1 or outputs[-1] < 1:
            raise TraceError(
                f"line {line_no}: token counts must be >= 1 (prompt_len={prompts[-1]}, output_len={outputs[-1]})"
            )
        if has_time:
            times.append(_parse_float(rec["arrival_time"], line_no, "arrival_time"))
    return RequestTrace(prompts, outputs, times if has_time else None)


def write_request_trace(trace: RequestTrace, dest: PathOrStream) -> None:
    with _open_w(dest) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if trace.arrival_time is None:
            writer.writerow(REQUEST_HEADER[1:])
            writer.writerows(zip(trace.prompt_len, trace.output_len))
        else:
            writer.writerow(REQUEST_HEADER)
            writer.writerows(zip((repr(float(t)) for t in trace.arrival_time), trace.prompt_len, trace.output_len))


def load_batch_times(src: PathOrStream) -> BatchTimeTrace:
    values = []
    with _open(src) as fh:
        reader = csv.DictReader(fh)
        if "batch_seconds" not in (reader.fieldnames or []):
            raise TraceError(f"line 1: header must contain batch_seconds (got {reader.fieldnames})")
        for rec in reader:
            values.append(_parse_float(rec["batch_seconds"], reader.line_num, "batch_seconds"))
    return BatchTimeTrace(values)


def fit_empirical_pmf(
    trace: RequestTrace,
    split: float = 0.8,
    seed: int = 0,
    chunk_size: int = 512,
) -> Tuple[EmpiricalWorkload, RequestTrace]:
    """Random train/test split; the pmf is the normalized (s, o) counts of the train rows.

    The train part has ``floor(split * N)`` rows.
    """
    if not 0.0 < split < 1.0:
        raise ValueError(f"split must lie strictly between 0 and 1, got {split}")
    n = len(trace)
    n_train = math.floor(split * n)
    if n_train == 0:
        raise TraceError(f"split {split} of {n} rows leaves an empty training set")
    perm = np.random.default_rng(seed).permutation(n)
    train, test = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    pmf = EmpiricalWorkload.from_counts(
        ((trace.prompt_len[i], trace.output_len[i]) for i in train), chunk_size=chunk_size
    )
    times = trace.arrival_time
    test_trace = RequestTrace(
        [trace.prompt_len[i] for i in test],
        [trace.output_len[i] for i in test],
        None if times is None else [times[i] for i in test],
    )
    return pmf, test_trace


def estimate_slot_seconds(bt: BatchTimeTrace | Sequence[float], method: str = "median", trim: float = 0.1) -> float:
    """Batch duration estimate: ``median`` or ``trimmed-mean`` (top ``trim`` fraction dropped)."""
    samples = bt.batch_seconds if isinstance(bt, BatchTimeTrace) else list(bt)
    if not samples:
        raise analysis.InsufficientDataError("no batch times to estimate from")
    if method == "median":
        return analysis.median(samples)
    if method == "trimmed-mean":
        return analysis.trimmed_mean(samples, trim)
    raise ValueError(f"unknown estimator {method!r}; use median or trimmed-mean")


def _open_w(dest: PathOrStream):
    if hasattr(dest, "write"):
        return _Borrowed(dest)
    return open(dest, "w", newline="", encoding="utf-8")


def _csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(int(v))


def _opt(col: np.ndarray) -> List[Optional[int]]:
    return [None if x < 0 else int(x) for x in col]


def slot_rows(slots: dict, replica: Optional[int] = None):
    cols = [
        slots["memory_used"],
        slots["occupancy_end"],
        slots["queue_len"],
        slots["in_progress"],
        slots["arrivals"],
        slots["completions"],
    ]
    prefix = [] if replica is None else [replica]
    for t, vals in enumerate(zip(*cols)):
        yield [*prefix, t, *(int(v) for v in vals)]


def request_rows(requests: dict, with_replica: bool = False):
    names = ["id", "s", "o", "arrival_slot", "first_service_slot", "completion_slot"]
    first = _opt(requests["first_service_slot"])
    done = _opt(requests["completion_slot"])
    for i in range(len(requests["id"])):
        row = [int(requests[k][i]) for k in names[:4]] + [first[i], done[i]]
        if with_replica:
            row = [int(requests["replica"][i])] + row
        yield [_cell(v) for v in row]


def drift_rows(series: "analysis.DriftSeries", replica: Optional[int] = None):
    prefix = [] if replica is None else [replica]
    for t in range(len(series)):
        yield [
            *prefix,
            t,
            int(series.outstanding_demand[t]),
            int(series.memory_used[t]),
            int(series.new_demand[t]),
            int(series.residual[t]),
        ]


def _json_text(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=2) + "\n"


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if hasattr(obj, "to_dict"):
        return _plain(obj.to_dict())
    return obj


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class ResultBundle:
    """Everything :func:`write_results` may emit; missing parts become empty files."""

    capacity: Optional[object] = None
    measurement: Optional[object] = None
    config: Optional[dict] = None
    replicas: List[object] = field(default_factory=list)  # ReplicaRun objects
    requests: Optional[dict] = None
    queue_len: Optional[np.ndarray] = None
    waiting_cdf: Optional["analysis.WaitingCdf"] = None
    drift: List[object] = field(default_factory=list)  # one DriftSeries per replica


def write_results(bundle: ResultBundle, out_dir: Union[str, os.PathLike]) -> dict:
    """Write the fixed artifact set into ``out_dir`` and return the manifest.

    Cluster runs (more than one replica) get a leading ``replica`` column in
    the slot, request and drift files.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc

    multi = len(bundle.replicas) > 1
    rep_col = ("replica",) if multi else ()
    files = {}
    files["capacity.json"] = _json_text(bundle.capacity or {})
    files["measurement.json"] = _json_text(bundle.measurement or {})
    if bundle.config is not None:
        files["config.json"] = _json_text(bundle.config)

    slot_lines = []
    for rep, run in enumerate(bundle.replicas):
        slot_lines.extend(slot_rows(run.slots, rep if multi else None))
    files["slots.csv"] = _csv_text(rep_col + SLOT_HEADER, slot_lines)

    requests = bundle.requests or {}
    files["requests.csv"] = _csv_text(
        rep_col + REQUESTS_HEADER, request_rows(requests, multi) if requests else []
    )
    queue = bundle.queue_len if bundle.queue_len is not None else np.zeros(0, dtype=np.int64)
    files["queue.csv"] = _csv_text(QUEUE_HEADER, ([t, int(q)] for t, q in enumerate(queue)))
    cdf_points = bundle.waiting_cdf.points if bundle.waiting_cdf is not None else []
    files["waiting_cdf.csv"] = _csv_text(CDF_HEADER, ([repr(w), repr(f)] for w, f in cdf_points))
    drift_lines = []
    for rep, series in enumerate(bundle.drift):
        drift_lines.extend(drift_rows(series, rep if multi else None))
    files["drift.csv"] = _csv_text(rep_col + DRIFT_HEADER, drift_lines)

    manifest = {"files": {}}
    for name in sorted(files):
        path = out / name
        try:
            path.write_text(files[name], encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
        manifest["files"][name] = sha256_file(path)
    (out / "manifest.json").write_text(_json_text(manifest), encoding="utf-8")
    return manifest


def read_csv(path: Union[str, os.PathLike]) -> Tuple[List[str], List[List[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def stream_from_trace(trace: RequestTrace, slot_seconds: float):
    """Turn a timestamped trace into a :class:`~kvqueue.sim_core.RequestStream`."""
    from .sim_core import RequestStream

    if trace.arrival_time is None:
        raise TraceError("trace has no arrival_time column")
    ordered = trace.sorted_by_arrival()
    t0 = ordered.arrival_time[0] if len(ordered) else 0.0
    slots = [math.floor((t - t0) / slot_seconds) for t in ordered.arrival_time]
    return RequestStream(slots, ordered.prompt_len, ordered.output_len)


def load_json(path: Union[str, os.PathLike]) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise TraceError(f"{path}: invalid JSON at line {exc.lineno} ({exc.msg})") from None

