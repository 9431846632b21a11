"""Capacity formulas, stability verdicts and empirical measurements."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .workload import (
    WorkloadSpec,
    ess_sup_total,
    expected_footprint,
    num_chunks,
    segment_footprints,
)


class InsufficientDataError(ValueError):
    pass


class InfeasibleDeploymentError(ValueError):
    pass


class DriftMismatchError(RuntimeError):
    """The outstanding-demand bookkeeping disagrees with the per-slot work."""


def _positive(**values: float) -> None:
    for name, v in values.items():
        if not (v > 0 and math.isfinite(v)):
            raise ValueError(f"{name} must be a positive finite number, got {v!r}")


def theoretical_rate(memory: float, slot_seconds: float, expected_footprint: float) -> float:
    """Requests per second a memory budget can sustain: M / (b * E[g])."""
    _positive(memory=memory, slot_seconds=slot_seconds, expected_footprint=expected_footprint)
    return memory / (slot_seconds * expected_footprint)


def mixture_rate(segments: Sequence[Tuple[float, float]]) -> float:
    """q-weighted harmonic mean of per-segment rates."""
    if not segments:
        raise ValueError("mixture_rate needs at least one segment")
    total_q = math.fsum(q for q, _ in segments)
    if abs(total_q - 1.0) > 1e-9:
        raise ValueError(f"segment fractions sum to {total_q!r}, not 1")
    for q, mu in segments:
        if q < 0:
            raise ValueError(f"negative fraction {q}")
        _positive(mu=mu)
    return 1.0 / math.fsum(q / mu for q, mu in segments)


def memory_slack(ess_sup_total: float, memory: float) -> float:
    _positive(ess_sup_total=ess_sup_total, memory=memory)
    if ess_sup_total > memory:
        raise InfeasibleDeploymentError(
            f"largest request needs {ess_sup_total} tokens but M={memory}; it can never be served"
        )
    return ess_sup_total / memory


@dataclass
class SegmentRate:
    fraction: float
    slot_seconds: float
    expected_footprint: float
    mu: float


@dataclass
class CapacityReport:
    mu_theory: float
    delta: float
    stable_below: float
    overloaded_above: float
    memory: float
    slot_seconds: float
    expected_footprint: float
    ess_sup_total: int
    chunk_size: int
    segments: List[SegmentRate] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def capacity_report(
    spec: WorkloadSpec,
    memory: float,
    slot_seconds: float | Sequence[float],
) -> CapacityReport:
    """Analytic capacity of one replica.

    For a mixture, ``slot_seconds`` may list one batch time per segment; the
    reported rate is then the harmonic mixture of the segment rates and
    ``slot_seconds`` / ``expected_footprint`` are the q-weighted means.
    """
    parts = segment_footprints(spec)
    if isinstance(slot_seconds, (int, float)):
        per_seg = [float(slot_seconds)] * len(parts)
    else:
        per_seg = [float(b) for b in slot_seconds]
        if len(per_seg) == 1:
            per_seg = per_seg * len(parts)
        if len(per_seg) != len(parts):
            raise ValueError(f"got {len(per_seg)} slot times for {len(parts)} workload segments")
    segments = [
        SegmentRate(q, b, eg, theoretical_rate(memory, b, eg)) for (q, eg), b in zip(parts, per_seg)
    ]
    mu = segments[0].mu if len(segments) == 1 else mixture_rate([(x.fraction, x.mu) for x in segments])
    sup = ess_sup_total(spec)
    delta = memory_slack(sup, memory)
    return CapacityReport(
        mu_theory=mu,
        delta=delta,
        stable_below=mu * (1.0 - delta),
        overloaded_above=mu,
        memory=memory,
        slot_seconds=math.fsum(x.fraction * x.slot_seconds for x in segments),
        expected_footprint=expected_footprint(spec),
        ess_sup_total=sup,
        chunk_size=spec.chunk_size,
        segments=segments if len(segments) > 1 else [],
    )


STABLE = "stable"
GRAY_ZONE = "gray-zone"
OVERLOADED = "overloaded"


def classify_stability(lam: float, report: CapacityReport) -> str:
    """Three-way verdict; between mu(1-delta) and mu neither theorem applies."""
    if lam < 0:
        raise ValueError(f"arrival rate must be >= 0, got {lam}")
    if lam < report.stable_below:
        return STABLE
    if lam > report.overloaded_above:
        return OVERLOADED
    return GRAY_ZONE


def drift_margin(lam: float, report: CapacityReport) -> float:
    """Per-slot drift margin epsilon; positive only when the stability condition holds."""
    return (report.stable_below - lam) * report.slot_seconds * report.expected_footprint


def remaining_demand(r, chunk: int) -> int:
    """Footprint still owed by request ``r`` (needs ``s, o, c, d``), by term enumeration."""
    if r.d >= r.o:
        return 0
    k = num_chunks(r.s, chunk)
    total = sum(min(j * chunk, r.s) for j in range(r.c + 1, k + 1))
    total += sum(r.s + j for j in range(r.d + 1, r.o + 1))
    return total


def remaining_demand_closed_form(s: int, o: int, c: int, d: int, chunk: int) -> float:
    """Closed forms for the divisible case ``chunk | s``.

    Counts only units after the ``c``-th chunk / ``d``-th token.
    """
    if s % chunk:
        raise ValueError("closed form assumes chunk divides s")
    k = s // chunk
    if c < k:
        return (c + 1 + k) * chunk * (k - c) / 2 + o * s + (1 + o) * o / 2
    return s * (o - d) + (o - d) * (o + d + 1) / 2


@dataclass
class DriftSeries:
    outstanding_demand: np.ndarray
    memory_used: np.ndarray
    new_demand: np.ndarray
    residual: np.ndarray
    threshold: float
    mean_drift_above_threshold: Optional[float]
    slots_above_threshold: int

    def __len__(self) -> int:
        return len(self.outstanding_demand)


def drift_series(
    outstanding_demand: Sequence[int],
    memory_used: Sequence[int],
    new_demand: Sequence[int],
    threshold: float = 0.0,
    check: bool = True,
) -> DriftSeries:
    """Check V(t+1) = V(t) - U_t + (arrival demand) slot by slot.

    ``outstanding_demand[t]`` is V after slot ``t``; V before the first slot is 0.
    ``threshold`` is the level K above which the mean one-step drift is reported.
    """
    v = np.asarray(outstanding_demand, dtype=np.int64)
    u = np.asarray(memory_used, dtype=np.int64)
    a = np.asarray(new_demand, dtype=np.int64)
    if not (len(v) == len(u) == len(a)):
        raise ValueError("drift inputs must have equal length")
    if len(v) and (v < 0).any():
        raise DriftMismatchError("outstanding demand missing or negative; was demand tracking on?")
    prev = np.concatenate([np.zeros(1, dtype=np.int64), v[:-1]])
    residual = v - prev + u - a
    if check and residual.any():
        bad = int(np.flatnonzero(residual)[0])
        raise DriftMismatchError(f"drift identity broken at slot {bad}: residual {int(residual[bad])}")
    above = prev > threshold
    mean_drift = float((v - prev)[above].mean()) if above.any() else None
    return DriftSeries(v, u, a, residual, float(threshold), mean_drift, int(above.sum()))


@dataclass
class MeasurementReport:
    mu_measured: float
    window: Tuple[float, float]
    completed_in_window: int
    warmup_excluded: int
    gap: Optional[float] = None
    mu_theory: Optional[float] = None
    replicas: int = 1

    def to_dict(self) -> dict:
        out = asdict(self)
        out["window"] = list(self.window)
        return out


def default_warmup(n: int) -> int:
    return min(1000, n // 10)


def measured_rate(
    arrival_slot: Sequence[int],
    completion_slot: Sequence[int],
    warmup: int,
    slot_seconds: float,
) -> MeasurementReport:
    """Completions per second inside the steady-state arrival window.

    Records are in arrival order; a completion slot of -1 means unfinished.
    The window runs from the arrival of request ``warmup+1`` to the arrival of
    request ``N-warmup`` (1-based), so drain-phase completions are excluded.
    """
    arr = np.asarray(arrival_slot, dtype=np.int64)
    done = np.asarray(completion_slot, dtype=np.int64)
    n = len(arr)
    if warmup < 0:
        raise ValueError("warmup must be >= 0")
    if n <= 2 * warmup or n < 2:
        raise InsufficientDataError(f"{n} requests leave nothing after excluding {warmup} at each end")
    start = arr[warmup] * slot_seconds
    end = arr[n - warmup - 1] * slot_seconds
    if end <= start:
        raise InsufficientDataError("measurement window has zero duration")
    t_done = done * slot_seconds
    inside = int(((done >= 0) & (t_done >= start) & (t_done <= end)).sum())
    return MeasurementReport(
        mu_measured=float(inside / (end - start)),
        window=(float(start), float(end)),
        completed_in_window=inside,
        warmup_excluded=2 * warmup,
    )


def gap(mu_theory: float, mu_measured: float) -> float:
    """|theory - measured| / measured."""
    if not mu_measured > 0:
        raise ValueError(f"measured rate must be positive, got {mu_measured}")
    return abs(mu_theory - mu_measured) / mu_measured


def trimmed_mean(samples: Iterable[float], trim_top: float) -> float:
    """Mean after dropping the largest ``ceil(trim_top * n)`` samples (top tail only)."""
    xs = sorted(samples)
    if not xs:
        raise InsufficientDataError("trimmed mean of an empty sample")
    if not 0.0 <= trim_top < 1.0:
        raise ValueError(f"trim fraction must lie in [0, 1), got {trim_top}")
    drop = math.ceil(trim_top * len(xs))
    kept = xs[: len(xs) - drop] if drop else xs
    if not kept:
        raise InsufficientDataError("trim removed every sample")
    return math.fsum(kept) / len(kept)


def median(samples: Iterable[float]) -> float:
    xs = sorted(samples)
    if not xs:
        raise InsufficientDataError("median of an empty sample")
    mid = len(xs) // 2
    if len(xs) % 2:
        return xs[mid]
    return (xs[mid - 1] + xs[mid]) / 2


def plan_gpus(lam: float, mu: float, rho: float = 1.0) -> int:
    """Replica count for arrival rate ``lam`` at target utilization ``rho``."""
    _positive(lam=lam, mu=mu, rho=rho)
    if rho > 1:
        raise ValueError(f"target utilization must be <= 1, got {rho}")
    # guards against 26.1 / 3.2625 style ratios landing a hair above an integer
    return max(1, math.ceil(lam / (mu * rho) - 1e-9))


@dataclass
class WaitingCdf:
    points: List[Tuple[float, float]]
    censored: int


def waiting_time_cdf(
    arrival_slot: Sequence[int],
    first_service_slot: Sequence[int],
    slot_seconds: float,
) -> WaitingCdf:
    """Empirical CDF of queueing delay; requests never started are counted as censored."""
    arr = np.asarray(arrival_slot, dtype=np.int64)
    first = np.asarray(first_service_slot, dtype=np.int64)
    started = first >= 0
    waits = np.sort((first[started] - arr[started]) * slot_seconds)
    n = len(waits)
    if n == 0:
        return WaitingCdf([], int((~started).sum()))
    values, counts = np.unique(waits, return_counts=True)
    cum = np.cumsum(counts) / n
    return WaitingCdf([(float(w), float(f)) for w, f in zip(values, cum)], int((~started).sum()))


def queue_slope(queue_len: Sequence[float], slot_seconds: float) -> float:
    """Least-squares growth rate (requests/second) over the last 80% of the series."""
    q = np.asarray(queue_len, dtype=float)
    if len(q) < 100:
        raise InsufficientDataError(f"queue series has {len(q)} slots; need at least 100")
    _positive(slot_seconds=slot_seconds)
    tail = q[len(q) // 5 :]
    t = (np.arange(len(q) - len(tail), len(q), dtype=float)) * slot_seconds
    t -= t.mean()
    return float((t * (tail - tail.mean())).sum() / (t * t).sum())


INCONCLUSIVE = "inconclusive"


def empirical_label(
    queue_len: Sequence[float],
    slot_seconds: float,
    lam: float,
    stable_cap: float = 20,
) -> str:
    """Label a run from its queue trajectory (arrival phase only)."""
    q = np.asarray(queue_len, dtype=float)
    horizon = len(q) * slot_seconds
    slope = queue_slope(q, slot_seconds)
    if slope > max(0.05 * lam, 5.0 / horizon):
        return OVERLOADED
    if q.max(initial=0) <= stable_cap:
        return STABLE
    return INCONCLUSIVE

