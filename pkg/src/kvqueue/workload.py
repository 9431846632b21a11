"""Request-size distributions and per-request KV-cache footprints.

A request with prompt length ``s`` and output length ``o`` occupies memory in
a staircase: prefill chunk ``j`` ends at ``min(j * chunk, s)`` tokens, decode
token ``j`` ends at ``s + j`` tokens.  The *lifetime footprint* is the area
under that staircase, summed over every unit of work the request needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence, Tuple

import numpy as np

PMF_TOLERANCE = 1e-9


class WorkloadError(ValueError):
    """Raised for invalid request sizes or malformed workload definitions."""


@dataclass(frozen=True)
class RequestSample:
    prompt_len: int
    output_len: int

    def __post_init__(self) -> None:
        if self.prompt_len < 1 or self.output_len < 1:
            raise WorkloadError(
                f"request sizes must be >= 1 token, got s={self.prompt_len}, o={self.output_len}"
            )


def _check_sizes(s: int, o: int, chunk: int) -> None:
    if s < 1 or o < 1 or chunk < 1:
        raise WorkloadError(f"footprint needs s, o, chunk >= 1 (got {s}, {o}, {chunk})")


def lifetime_footprint(s: float, o: float, chunk: float) -> float:
    """Closed-form lifetime footprint with ``s / chunk`` taken as a real number.

    Exact when ``chunk`` divides ``s``; otherwise it is the smooth
    approximation used by the capacity formula.
    """
    _check_sizes(s, o, chunk)
    return ((1.0 + s / chunk) * s + 2.0 * o * s + (1.0 + o) * o) / 2.0


def num_chunks(s: int, chunk: int) -> int:
    return -(-s // chunk)


def exact_prefill_footprint(s: int, chunk: int) -> int:
    k = num_chunks(s, chunk)
    # chunks 1..k-1 end at j*chunk, the last one ends at s
    return chunk * (k - 1) * k // 2 + s


def exact_footprint(s: int, o: int, chunk: int) -> int:
    """Integer footprint the simulator charges: partial last chunk, then decode."""
    _check_sizes(s, o, chunk)
    return exact_prefill_footprint(s, chunk) + o * s + o * (o + 1) // 2


class WorkloadSpec:
    """Base class for the joint distribution of (prompt_len, output_len)."""

    kind: str = ""
    chunk_size: int

    def _check_chunk(self) -> None:
        if int(self.chunk_size) != self.chunk_size or self.chunk_size < 1:
            raise WorkloadError(f"chunk_size must be a positive integer, got {self.chunk_size}")


@dataclass(frozen=True)
class UniformWorkload(WorkloadSpec):
    """Independent discrete uniforms over ``[s_lo, s_hi] x [o_lo, o_hi]`` (inclusive)."""

    s_lo: int
    s_hi: int
    o_lo: int
    o_hi: int
    chunk_size: int = 512
    kind = "independent-uniform"

    def __post_init__(self) -> None:
        self._check_chunk()
        if not (1 <= self.s_lo <= self.s_hi and 1 <= self.o_lo <= self.o_hi):
            raise WorkloadError(
                f"bad uniform bounds s=[{self.s_lo},{self.s_hi}] o=[{self.o_lo},{self.o_hi}]"
            )


@dataclass(frozen=True)
class EmpiricalWorkload(WorkloadSpec):
    """Explicit joint pmf over (s, o) pairs, stored sorted by key."""

    table: Tuple[Tuple[Tuple[int, int], float], ...]
    chunk_size: int = 512
    kind = "empirical-pmf"

    def __post_init__(self) -> None:
        self._check_chunk()
        if not self.table:
            raise WorkloadError("empirical pmf is empty")
        total = 0.0
        for (s, o), p in self.table:
            RequestSample(s, o)
            if p < 0 or not math.isfinite(p):
                raise WorkloadError(f"negative or non-finite probability {p} for {(s, o)}")
            total += p
        if abs(total - 1.0) > PMF_TOLERANCE:
            raise WorkloadError(f"pmf probabilities sum to {total!r}, not 1")

    @classmethod
    def from_mapping(cls, pmf: Mapping[Tuple[int, int], float], chunk_size: int = 512) -> "EmpiricalWorkload":
        table = tuple(sorted(((int(s), int(o)), float(p)) for (s, o), p in pmf.items()))
        return cls(table=table, chunk_size=chunk_size)

    @classmethod
    def from_counts(cls, pairs: Iterable[Tuple[int, int]], chunk_size: int = 512) -> "EmpiricalWorkload":
        counts: dict = {}
        for s, o in pairs:
            counts[(int(s), int(o))] = counts.get((int(s), int(o)), 0) + 1
        n = sum(counts.values())
        if n == 0:
            raise WorkloadError("cannot build a pmf from zero rows")
        return cls.from_mapping({k: v / n for k, v in counts.items()}, chunk_size)

    def support(self):
        return [(key, p) for key, p in self.table if p > 0]


@dataclass(frozen=True)
class MixtureWorkload(WorkloadSpec):
    """Consecutive segments: the first ``q_1`` fraction of requests from segment 1, and so on."""

    segments: Tuple[Tuple[float, WorkloadSpec], ...]
    kind = "segmented-mixture"

    def __post_init__(self) -> None:
        if not self.segments:
            raise WorkloadError("mixture needs at least one segment")
        chunks = {seg.chunk_size for _, seg in self.segments}
        if len(chunks) != 1:
            raise WorkloadError(f"mixture segments disagree on chunk size: {sorted(chunks)}")
        for q, seg in self.segments:
            if not q > 0:
                raise WorkloadError(f"mixture fractions must be positive, got {q}")
            if isinstance(seg, MixtureWorkload):
                raise WorkloadError("nested mixtures are not supported")
        total = sum(q for q, _ in self.segments)
        if abs(total - 1.0) > PMF_TOLERANCE:
            raise WorkloadError(f"mixture fractions sum to {total!r}, not 1")

    @property
    def chunk_size(self) -> int:  # type: ignore[override]
        return self.segments[0][1].chunk_size

    def segment_index(self, position: float) -> int:
        cum = 0.0
        for idx, (q, _) in enumerate(self.segments):
            cum += q
            if position < cum:
                return idx
        return len(self.segments) - 1


# Bounds of the three prefill/decode-ratio workloads (Uniform(10, 1600) etc.).
PRESET_BOUNDS = {
    "pd-1-1": (10, 1600, 10, 1600),
    "pd-2-1": (10, 2133, 10, 1066),
    "pd-1-2": (10, 1066, 10, 2133),
}


def preset(name: str, chunk_size: int = 512) -> UniformWorkload:
    try:
        bounds = PRESET_BOUNDS[name]
    except KeyError:
        raise WorkloadError(f"unknown workload preset {name!r}; choose from {sorted(PRESET_BOUNDS)}") from None
    return UniformWorkload(*bounds, chunk_size=chunk_size)


def mixture(parts: Sequence[Tuple[float, WorkloadSpec]]) -> MixtureWorkload:
    return MixtureWorkload(segments=tuple((float(q), w) for q, w in parts))


def _uniform_moments(lo: int, hi: int) -> Tuple[float, float]:
    n = hi - lo + 1
    sq = hi * (hi + 1) * (2 * hi + 1) // 6 - (lo - 1) * lo * (2 * lo - 1) // 6
    return (lo + hi) / 2.0, sq / n


def expected_footprint(spec: WorkloadSpec) -> float:
    """E[g(s, o)] under ``spec`` using the real-valued closed form of g."""
    if isinstance(spec, UniformWorkload):
        es, es2 = _uniform_moments(spec.s_lo, spec.s_hi)
        eo, eo2 = _uniform_moments(spec.o_lo, spec.o_hi)
        return (es + es2 / spec.chunk_size + 2.0 * eo * es + eo + eo2) / 2.0
    if isinstance(spec, EmpiricalWorkload):
        return math.fsum(p * lifetime_footprint(s, o, spec.chunk_size) for (s, o), p in spec.table)
    if isinstance(spec, MixtureWorkload):
        return math.fsum(q * ef for q, ef in segment_footprints(spec))
    raise WorkloadError(f"unsupported workload type {type(spec).__name__}")


def segment_footprints(spec: WorkloadSpec) -> list:
    """``[(q, E[g])]`` per segment; a non-mixture is a single segment with q=1."""
    if isinstance(spec, MixtureWorkload):
        return [(q, expected_footprint(seg)) for q, seg in spec.segments]
    return [(1.0, expected_footprint(spec))]


def ess_sup_total(spec: WorkloadSpec) -> int:
    """Largest s + o with positive probability."""
    if isinstance(spec, UniformWorkload):
        return spec.s_hi + spec.o_hi
    if isinstance(spec, EmpiricalWorkload):
        return max(s + o for (s, o), _ in spec.support())
    if isinstance(spec, MixtureWorkload):
        return max(ess_sup_total(seg) for _, seg in spec.segments)
    raise WorkloadError(f"unsupported workload type {type(spec).__name__}")


def sup_footprint(spec: WorkloadSpec) -> float:
    """Largest closed-form lifetime footprint over the support (g grows in s and o)."""
    if isinstance(spec, UniformWorkload):
        return lifetime_footprint(spec.s_hi, spec.o_hi, spec.chunk_size)
    if isinstance(spec, EmpiricalWorkload):
        return max(lifetime_footprint(s, o, spec.chunk_size) for (s, o), _ in spec.support())
    if isinstance(spec, MixtureWorkload):
        return max(sup_footprint(seg) for _, seg in spec.segments)
    raise WorkloadError(f"unsupported workload type {type(spec).__name__}")


def _draw(spec: WorkloadSpec, rng: np.random.Generator, n: int) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(spec, UniformWorkload):
        s = rng.integers(spec.s_lo, spec.s_hi + 1, size=n)
        o = rng.integers(spec.o_lo, spec.o_hi + 1, size=n)
        return s.astype(np.int64), o.astype(np.int64)
    if isinstance(spec, EmpiricalWorkload):
        keys = np.array([k for k, _ in spec.table], dtype=np.int64)
        probs = np.array([p for _, p in spec.table], dtype=float)
        idx = rng.choice(len(keys), size=n, p=probs / probs.sum())
        return keys[idx, 0].copy(), keys[idx, 1].copy()
    raise WorkloadError(f"cannot draw directly from {type(spec).__name__}")


def sample_request(spec: WorkloadSpec, rng: np.random.Generator, segment_position: float = 0.0) -> RequestSample:
    """One i.i.d. draw; for a mixture, ``segment_position`` picks the active segment."""
    if isinstance(spec, MixtureWorkload):
        if not 0.0 <= segment_position <= 1.0:
            raise WorkloadError(f"segment_position must lie in [0, 1], got {segment_position}")
        spec = spec.segments[spec.segment_index(segment_position)][1]
    s, o = _draw(spec, rng, 1)
    return RequestSample(int(s[0]), int(o[0]))


def sample_requests(spec: WorkloadSpec, rng: np.random.Generator, n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` requests in ordinal order; request ``k`` sits at position ``k / n``."""
    if n < 0:
        raise WorkloadError("cannot draw a negative number of requests")
    if not isinstance(spec, MixtureWorkload):
        return _draw(spec, rng, n)
    seg_of = np.array([spec.segment_index(k / n) for k in range(n)], dtype=np.int64)
    s = np.empty(n, dtype=np.int64)
    o = np.empty(n, dtype=np.int64)
    for idx, (_, seg) in enumerate(spec.segments):
        mask = seg_of == idx
        s[mask], o[mask] = _draw(seg, rng, int(mask.sum()))
    return s, o


def describe(spec: WorkloadSpec) -> dict:
    """JSON-friendly description, used when echoing configs and reports."""
    if isinstance(spec, UniformWorkload):
        return {
            "kind": spec.kind,
            "s": [spec.s_lo, spec.s_hi],
            "o": [spec.o_lo, spec.o_hi],
            "chunk_size": spec.chunk_size,
        }
    if isinstance(spec, EmpiricalWorkload):
        return {"kind": spec.kind, "support_size": len(spec.table), "chunk_size": spec.chunk_size}
    if isinstance(spec, MixtureWorkload):
        return {
            "kind": spec.kind,
            "segments": [{"fraction": q, "workload": describe(seg)} for q, seg in spec.segments],
        }
    raise WorkloadError(f"unsupported workload type {type(spec).__name__}")

