"""Command line entry point: ``kvqueue {theory,simulate,estimate-b,plan,validate}``.

Every option can also come from a YAML/JSON config file (``--config``); flags
given on the command line win.  Exit codes: 0 ok, 1 usage or config error,
2 I/O error, 3 validation failed.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import yaml

from . import analysis, trace_io
from .cluster import ClusterConfig, run_cluster, run_stream
from .sim_core import PROCESS_KINDS, POLICIES, SWAP_MODES, default_slot_cap
from .workload import (
    PRESET_BOUNDS,
    EmpiricalWorkload,
    WorkloadError,
    WorkloadSpec,
    mixture,
    preset,
    sup_footprint,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_VALIDATION = 3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    workload: Union[str, list, None] = None
    memory: int = 131000
    chunk: int = 512
    slot_seconds: Union[float, List[float], None] = None
    batch_times: Optional[str] = None
    estimator: str = "median"
    trim: float = 0.1
    arrival_rate: Union[float, List[float], None] = None
    replicas: int = 1
    policy: str = "fcfs"
    arrival_process: str = "poisson"
    swap: str = "free"
    requests: int = 20000
    seed: int = 0
    warmup: Optional[int] = None
    split: Optional[float] = None
    slot_cap: Optional[int] = None
    track_demand: bool = True
    rho: float = 1.0
    mu: Optional[float] = None
    tolerance: float = 0.10
    output: Optional[str] = None

    def echo(self) -> dict:
        """Resolved settings without the output location."""
        out = {k: v for k, v in asdict(self).items() if k != "output"}
        return out


CONFIG_ALIASES = {"lambda": "arrival_rate", "total_requests": "requests", "memory_limit": "memory"}


def load_config(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: cannot parse config ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a mapping of option names to values")
    known = {f.name for f in fields(RunConfig)}
    out = {}
    for key, value in data.items():
        name = CONFIG_ALIASES.get(key, key.replace("-", "_"))
        if name not in known:
            raise ConfigError(f"{path}: unknown option {key!r}")
        out[name] = value
    return out


def _float_list(text: str) -> Union[float, List[float]]:
    try:
        values = [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or comma-separated numbers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty number list")
    return values[0] if len(values) == 1 else values


def _as_list(x) -> List[float]:
    if x is None:
        return []
    if isinstance(x, (list, tuple)):
        return [float(v) for v in x]
    return [float(v) for v in str(x).split(",")] if isinstance(x, str) else [float(x)]


def resolve(args: argparse.Namespace) -> RunConfig:
    values = load_config(args.config) if getattr(args, "config", None) else {}
    for f in fields(RunConfig):
        cli_value = getattr(args, f.name, None)
        if cli_value is not None:
            values[f.name] = cli_value
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    if cfg.policy not in POLICIES:
        raise ConfigError(f"policy must be one of {POLICIES}")
    if cfg.arrival_process not in PROCESS_KINDS:
        raise ConfigError(f"arrival_process must be one of {PROCESS_KINDS}")
    if cfg.swap not in SWAP_MODES:
        raise ConfigError(f"swap must be one of {SWAP_MODES}")
    if cfg.memory < 1 or cfg.chunk < 1 or cfg.replicas < 1 or cfg.requests < 1:
        raise ConfigError("memory, chunk, replicas and requests must be positive integers")
    return cfg


def _segment(text: str, cfg: RunConfig):
    """One workload term: preset name or trace path."""
    if text in PRESET_BOUNDS:
        return preset(text, cfg.chunk), None
    path = Path(text)
    if not path.exists():
        raise ConfigError(f"workload {text!r} is neither a preset ({', '.join(PRESET_BOUNDS)}) nor an existing file")
    trace = trace_io.load_request_trace(path)
    if cfg.split is not None:
        return trace_io.fit_empirical_pmf(trace, cfg.split, cfg.seed, cfg.chunk)
    return EmpiricalWorkload.from_counts(zip(trace.prompt_len, trace.output_len), cfg.chunk), trace


def resolve_workload(cfg: RunConfig):
    """Returns ``(spec, trace_or_None)``; the trace is the replayable request set, if any."""
    wl = cfg.workload
    if wl is None:
        raise ConfigError("no workload given (use --workload PRESET|TRACE|NAME=q,NAME=q)")
    if isinstance(wl, list):
        parts = [(float(item["fraction"]), _segment(str(item["workload"]), cfg)[0]) for item in wl]
        return mixture(parts), None
    text = str(wl)
    if "=" in text:
        parts = []
        for term in text.split(","):
            name, _, q = term.partition("=")
            try:
                parts.append((float(q), _segment(name.strip(), cfg)[0]))
            except ValueError:
                raise ConfigError(f"bad mixture term {term!r}; expected NAME=FRACTION") from None
        return mixture(parts), None
    return _segment(text, cfg)


def resolve_slot_seconds(cfg: RunConfig) -> List[float]:
    if cfg.batch_times:
        bt = trace_io.load_batch_times(cfg.batch_times)
        return [trace_io.estimate_slot_seconds(bt, cfg.estimator, cfg.trim)]
    values = _as_list(cfg.slot_seconds)
    if not values:
        raise ConfigError("need --slot-seconds or --batch-times to fix the batch duration")
    return values


def _emit(obj) -> None:
    sys.stdout.write(trace_io._json_text(obj))


def cmd_theory(cfg: RunConfig) -> analysis.CapacityReport:
    spec, _ = resolve_workload(cfg)
    slot = resolve_slot_seconds(cfg)
    report = analysis.capacity_report(spec, cfg.memory, slot)
    if cfg.output:
        trace_io.write_results(trace_io.ResultBundle(capacity=report, config=cfg.echo()), cfg.output)
    return report


def _label(queue: np.ndarray, slot_seconds: float, lam: float) -> str:
    if len(queue) < 100:
        return analysis.INCONCLUSIVE
    return analysis.empirical_label(queue, slot_seconds, lam)


def simulate_one(cfg: RunConfig, spec: WorkloadSpec, trace, lam: Optional[float], slot_seconds: float):
    report = analysis.capacity_report(spec, cfg.memory, slot_seconds)
    cluster_cfg = ClusterConfig(
        replicas=cfg.replicas,
        memory_limit=cfg.memory,
        slot_seconds=slot_seconds,
        policy=cfg.policy,
        process_kind=cfg.arrival_process,
        swap=cfg.swap,
        slot_cap=cfg.slot_cap,
        track_demand=cfg.track_demand,
    )
    if lam is None:
        if trace is None or trace.arrival_time is None:
            raise ConfigError("--lambda is required unless the workload trace carries arrival_time")
        stream = trace_io.stream_from_trace(trace, slot_seconds)
        duration = max((stream.arrival_slot[-1] + 1) * slot_seconds, slot_seconds)
        lam = len(stream) / duration
        if cluster_cfg.slot_cap is None:
            cluster_cfg = replace(cluster_cfg, slot_cap=default_slot_cap(len(stream), lam, slot_seconds))
        outcome = run_stream(cluster_cfg, stream, spec.chunk_size)
    else:
        outcome = run_cluster(cluster_cfg, spec, lam, cfg.requests, cfg.seed)

    req = outcome.requests
    n = len(req["id"])
    warmup = cfg.warmup if cfg.warmup is not None else analysis.default_warmup(n)
    mu_total = report.mu_theory * cfg.replicas
    try:
        meas = analysis.measured_rate(req["arrival_slot"], req["completion_slot"], warmup, slot_seconds)
        meas.mu_theory = mu_total
        meas.replicas = cfg.replicas
        meas.gap = analysis.gap(mu_total, meas.mu_measured) if meas.mu_measured > 0 else None
        measurement = meas.to_dict()
    except analysis.InsufficientDataError as exc:
        measurement = {"error": str(exc), "mu_theory": mu_total, "replicas": cfg.replicas}

    arrival_queue = outcome.queue_len[: outcome.arrival_horizon]
    drift = []
    if cfg.track_demand:
        threshold = sup_footprint(spec)
        drift = [
            analysis.drift_series(
                run.slots["outstanding_demand"], run.slots["memory_used"], run.slots["new_demand"], threshold
            )
            for run in outcome.replicas
        ]
    measurement.update(
        {
            "arrival_rate": lam,
            "status": outcome.status,
            "completed": outcome.completed,
            "requested": outcome.requested,
            "max_queue_len": int(arrival_queue.max(initial=0)),
            "label": _label(arrival_queue, slot_seconds, lam),
            "verdict_theory": analysis.classify_stability(lam / cfg.replicas, report),
        }
    )
    if len(arrival_queue) >= 100:
        measurement["queue_slope"] = analysis.queue_slope(arrival_queue, slot_seconds)
    bundle = trace_io.ResultBundle(
        capacity=report,
        measurement=measurement,
        config={**cfg.echo(), "arrival_rate": lam, "slot_seconds": slot_seconds},
        replicas=outcome.replicas,
        requests=req if cfg.replicas > 1 else {k: v for k, v in req.items() if k != "replica"},
        queue_len=outcome.queue_len,
        waiting_cdf=analysis.waiting_time_cdf(req["arrival_slot"], req["first_service_slot"], slot_seconds),
        drift=drift,
    )
    return bundle, measurement


def cmd_simulate(cfg: RunConfig) -> List[dict]:
    spec, trace = resolve_workload(cfg)
    slots = resolve_slot_seconds(cfg)
    if len(slots) != 1:
        raise ConfigError("simulation uses one batch duration; give a single --slot-seconds")
    rates = _as_list(cfg.arrival_rate) or [None]
    results = []
    for lam in rates:
        bundle, measurement = simulate_one(cfg, spec, trace, lam, slots[0])
        if cfg.output:
            target = Path(cfg.output)
            if len(rates) > 1:
                target = target / f"lambda_{lam:g}"
            trace_io.write_results(bundle, target)
        results.append(measurement)
    return results


def cmd_estimate_b(cfg: RunConfig) -> dict:
    if not cfg.batch_times:
        raise ConfigError("estimate-b needs --batch-times FILE")
    bt = trace_io.load_batch_times(cfg.batch_times)
    value = trace_io.estimate_slot_seconds(bt, cfg.estimator, cfg.trim)
    out = {"slot_seconds": value, "method": cfg.estimator, "samples": len(bt.batch_seconds)}
    if cfg.estimator == "trimmed-mean":
        out["trim"] = cfg.trim
    return out


def cmd_plan(cfg: RunConfig) -> dict:
    rates = _as_list(cfg.arrival_rate)
    if len(rates) != 1:
        raise ConfigError("plan needs exactly one --lambda")
    out = {"arrival_rate": rates[0], "rho": cfg.rho}
    if cfg.mu is not None:
        mu = float(cfg.mu)
    else:
        report = cmd_theory(RunConfig(**{**asdict(cfg), "output": None}))
        mu = report.mu_theory
        out["capacity"] = report.to_dict()
    out["mu"] = mu
    out["gpus"] = analysis.plan_gpus(rates[0], mu, cfg.rho)
    return out


def cmd_validate(theory_path: str, measurement_path: str, tolerance: float) -> dict:
    theory = trace_io.load_json(theory_path)
    meas = trace_io.load_json(measurement_path)
    try:
        replicas = int(meas.get("replicas", 1))
        mu_theory = float(theory["mu_theory"]) * replicas
        mu_measured = float(meas["mu_measured"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"reports lack a usable mu_theory / mu_measured ({exc})") from None
    g = analysis.gap(mu_theory, mu_measured)
    return {
        "mu_theory": mu_theory,
        "mu_measured": mu_measured,
        "gap": g,
        "tolerance": tolerance,
        "pass": g <= tolerance,
    }


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON file with default option values")
    p.add_argument("--workload", help="preset (pd-1-1, pd-2-1, pd-1-2), trace path, or NAME=q,NAME=q mixture")
    p.add_argument("--memory", type=int, help="KV-cache capacity M in tokens")
    p.add_argument("--chunk", type=int, help="prefill chunk size in tokens")
    p.add_argument("--slot-seconds", dest="slot_seconds", type=_float_list,
                   help="batch duration b in seconds (one per mixture segment allowed for theory)")
    p.add_argument("--batch-times", dest="batch_times", help="CSV with a batch_seconds column to estimate b from")
    p.add_argument("--estimator", choices=("median", "trimmed-mean"))
    p.add_argument("--trim", type=float, help="top fraction dropped by the trimmed mean")
    p.add_argument("--split", type=float, help="train fraction when fitting a trace pmf")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", dest="output", help="directory for result files")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kvqueue", description="Capacity model and slotted simulator for KV-cache-bound LLM serving.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("theory", help="closed-form service rate and stability thresholds")
    _common(p)

    p = sub.add_parser("simulate", help="slotted simulation with measured rate and series")
    _common(p)
    p.add_argument("--lambda", dest="arrival_rate", type=_float_list,
                   help="arrival rate(s) in requests/second; a list runs a sweep")
    p.add_argument("--requests", type=int, help="requests per run")
    p.add_argument("--replicas", type=int)
    p.add_argument("--policy", choices=POLICIES)
    p.add_argument("--arrival-process", dest="arrival_process", choices=PROCESS_KINDS)
    p.add_argument("--swap", choices=SWAP_MODES)
    p.add_argument("--warmup", type=int, help="requests excluded at each end of the measurement window")
    p.add_argument("--slot-cap", dest="slot_cap", type=int)
    p.add_argument("--no-drift", dest="track_demand", action="store_const", const=False,
                   help="skip outstanding-demand tracking")

    p = sub.add_parser("estimate-b", help="estimate the batch duration from measured batch times")
    p.add_argument("--config")
    p.add_argument("--batch-times", dest="batch_times")
    p.add_argument("--method", dest="estimator", choices=("median", "trimmed-mean"))
    p.add_argument("--trim", type=float)

    p = sub.add_parser("plan", help="replicas needed for an arrival rate")
    _common(p)
    p.add_argument("--lambda", dest="arrival_rate", type=_float_list)
    p.add_argument("--rho", type=float, help="target utilization in (0, 1]")
    p.add_argument("--mu", type=float, help="per-replica rate; skips the theory computation")

    p = sub.add_parser("validate", help="GAP between a theory report and a measurement report")
    p.add_argument("theory", help="capacity.json")
    p.add_argument("measurement", help="measurement.json")
    p.add_argument("--tolerance", type=float, default=0.10)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, or a usage error already reported
        return int(exc.code or 0)
    try:
        if args.command == "validate":
            result = cmd_validate(args.theory, args.measurement, args.tolerance)
            _emit(result)
            return EXIT_OK if result["pass"] else EXIT_VALIDATION
        cfg = resolve(args)
        if args.command == "theory":
            _emit(cmd_theory(cfg))
        elif args.command == "simulate":
            results = cmd_simulate(cfg)
            _emit(results[0] if len(results) == 1 else results)
        elif args.command == "estimate-b":
            _emit(cmd_estimate_b(cfg))
        elif args.command == "plan":
            _emit(cmd_plan(cfg))
    except OSError as exc:
        print(f"kvqueue: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, WorkloadError, trace_io.TraceError, ValueError) as exc:
        print(f"kvqueue: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
