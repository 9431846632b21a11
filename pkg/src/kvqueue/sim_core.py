"""Single-replica slotted engine.

One slot is one batch of fixed duration.  In every slot the engine first
advances in-progress requests in priority order, then admits waiting requests
in priority order, never letting the end-of-slot KV occupancy exceed the
memory limit.  Memory of a request is released at the end of the slot that
produced its last output token.

Swap handling
-------------
Footprints only grow, so a full GPU with no completions pending would freeze
forever.  With ``swap="free"`` (the default) a request that does not fit may
push lower-priority, not-yet-considered residents out to host memory at zero
cost; they rejoin when room frees up and keep their progress.  With
``swap="none"`` nothing is ever evicted and a frozen in-progress set is
reported as a deadlock.

This module is the readable reference implementation.  Whole runs normally go
through :mod:`kvqueue._kernel`, which is checked slot-for-slot against it.
"""

from __future__ import annotations

import bisect
import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, List, Optional, Sequence, Tuple

import numpy as np

from . import analysis
from .workload import (
    RequestSample,
    WorkloadError,
    WorkloadSpec,
    exact_footprint,
    lifetime_footprint,
    num_chunks,
    sample_requests,
)

POLICIES = ("fcfs", "sjf")
PROCESS_KINDS = ("poisson", "bernoulli", "deterministic")
SWAP_MODES = ("free", "none")


class EngineError(RuntimeError):
    """Internal inconsistency in the engine state."""


@dataclass
class RequestState:
    id: int
    s: int
    o: int
    num_chunks: int
    arrival_slot: int
    c: int = 0
    d: int = 0
    first_service_slot: Optional[int] = None
    completion_slot: Optional[int] = None
    resident: bool = False
    # end-of-advance footprint of the last unit processed; 0 before admission
    footprint: int = 0

    @classmethod
    def new(cls, id: int, sample: RequestSample, chunk: int, arrival_slot: int) -> "RequestState":
        return cls(
            id=id,
            s=sample.prompt_len,
            o=sample.output_len,
            num_chunks=num_chunks(sample.prompt_len, chunk),
            arrival_slot=arrival_slot,
        )

    @property
    def done(self) -> bool:
        return self.d == self.o

    @property
    def phase(self) -> str:
        if self.done:
            return "complete"
        if self.c == 0:
            return "waiting"
        return "prefill" if self.c < self.num_chunks else "decode"


@dataclass
class SlotOutcome:
    slot: int
    memory_used: int
    occupancy_peak: int
    occupancy_end: int
    queue_len: int
    in_progress_count: int
    swapped_count: int
    admissions: int
    arrivals: int
    new_demand: int
    completions: List[Tuple[int, int, int, int]] = field(default_factory=list)
    outstanding_demand: Optional[int] = None


def priority_key(r: RequestState, policy: str, chunk: int):
    if policy == "fcfs":
        return (r.id,)
    return (lifetime_footprint(r.s, r.o, chunk), r.id)


@dataclass
class EngineState:
    memory_limit: int
    chunk_size: int
    policy: str = "fcfs"
    swap: str = "free"
    slot: int = 0
    in_progress: List[RequestState] = field(default_factory=list)
    waiting: Deque[RequestState] = field(default_factory=deque)
    deadlocked: bool = False
    _heap: list = field(default_factory=list, repr=False)
    _keys: list = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if self.swap not in SWAP_MODES:
            raise ValueError(f"swap must be one of {SWAP_MODES}, got {self.swap!r}")
        if self.memory_limit < 1 or self.chunk_size < 1:
            raise ValueError("memory_limit and chunk_size must be positive")

    @property
    def occupancy(self) -> int:
        return sum(r.footprint for r in self.in_progress if r.resident)

    def queue_len(self) -> int:
        return len(self._heap) if self.policy == "sjf" else len(self.waiting)

    def waiting_requests(self) -> List[RequestState]:
        if self.policy == "sjf":
            return [entry[-1] for entry in sorted(self._heap)]
        return list(self.waiting)

    def enqueue(self, r: RequestState) -> None:
        if self.policy == "sjf":
            heapq.heappush(self._heap, (*priority_key(r, "sjf", self.chunk_size), r))
        else:
            self.waiting.append(r)

    def peek_waiting(self) -> Optional[RequestState]:
        if self.policy == "sjf":
            return self._heap[0][-1] if self._heap else None
        return self.waiting[0] if self.waiting else None

    def pop_waiting(self) -> RequestState:
        if self.policy == "sjf":
            return heapq.heappop(self._heap)[-1]
        return self.waiting.popleft()

    def start(self, r: RequestState) -> None:
        key = priority_key(r, self.policy, self.chunk_size)
        pos = bisect.bisect_right(self._keys, key)
        self._keys.insert(pos, key)
        self.in_progress.insert(pos, r)

    def drop_completed(self) -> List[RequestState]:
        finished = [r for r in self.in_progress if r.done]
        if finished:
            keep = [(k, r) for k, r in zip(self._keys, self.in_progress) if not r.done]
            self._keys = [k for k, _ in keep]
            self.in_progress = [r for _, r in keep]
        return finished


def next_unit_cost(r: RequestState, chunk: int) -> int:
    """End-of-advance footprint of the request's next unit of work."""
    if r.d >= r.o:
        raise EngineError(f"request {r.id} is already complete")
    if r.c < r.num_chunks:
        return min((r.c + 1) * chunk, r.s)
    return r.s + r.d + 1


def _advance(r: RequestState, cost: int) -> None:
    r.footprint = cost
    r.resident = True
    if r.c < r.num_chunks:
        r.c += 1
    else:
        r.d += 1


def form_batch(state: EngineState) -> Tuple[List[int], List[int]]:
    """Pick this slot's work and apply it to ``state``.

    Returns ``(advanced_ids, admitted_ids)``.  Request counters and residency
    are updated in place; completed requests stay in ``in_progress`` until
    :func:`advance_slot` releases them.
    """
    limit = state.memory_limit
    chunk = state.chunk_size
    occ = state.occupancy
    advanced: List[int] = []
    running = state.in_progress
    for i, r in enumerate(running):
        cost = next_unit_cost(r, chunk)
        need = cost - r.footprint if r.resident else cost
        if occ + need > limit and state.swap == "free":
            j = len(running) - 1
            while occ + need > limit and j > i:
                victim = running[j]
                if victim.resident:
                    victim.resident = False
                    occ -= victim.footprint
                j -= 1
        if occ + need <= limit:
            occ += need
            _advance(r, cost)
            advanced.append(r.id)

    admitted: List[int] = []
    while True:
        head = state.peek_waiting()
        if head is None:
            break
        cost = min(chunk, head.s)
        if occ + cost > limit:
            break
        state.pop_waiting()
        occ += cost
        _advance(head, cost)
        head.first_service_slot = state.slot
        state.start(head)
        admitted.append(head.id)
    return advanced, admitted


def outstanding_demand(state: EngineState) -> int:
    total = sum(analysis.remaining_demand(r, state.chunk_size) for r in state.in_progress)
    total += sum(analysis.remaining_demand(r, state.chunk_size) for r in state.waiting_requests())
    return total


def advance_slot(
    state: EngineState,
    arrivals: Sequence[RequestState] = (),
    track_demand: bool = False,
) -> SlotOutcome:
    """Enqueue ``arrivals``, run one batch, release finished requests, tick the clock."""
    limit = state.memory_limit
    new_demand = 0
    for r in arrivals:
        if r.s + r.o > limit:
            raise WorkloadError(f"request {r.id} needs {r.s + r.o} tokens, more than M={limit}")
        r.arrival_slot = state.slot
        new_demand += exact_footprint(r.s, r.o, state.chunk_size)
        state.enqueue(r)

    had_running = bool(state.in_progress)
    advanced, admitted = form_batch(state)
    started = set(advanced) | set(admitted)
    memory_used = sum(r.footprint for r in state.in_progress if r.id in started)
    occ_peak = state.occupancy
    if occ_peak > limit:
        raise EngineError(f"slot {state.slot}: occupancy {occ_peak} exceeds M={limit}")

    finished = state.drop_completed()
    for r in finished:
        r.completion_slot = state.slot
        r.resident = False
    if had_running and not advanced and state.swap == "none":
        state.deadlocked = True

    out = SlotOutcome(
        slot=state.slot,
        memory_used=memory_used,
        occupancy_peak=occ_peak,
        occupancy_end=state.occupancy,
        queue_len=state.queue_len(),
        in_progress_count=len(state.in_progress),
        swapped_count=sum(1 for r in state.in_progress if not r.resident),
        admissions=len(admitted),
        arrivals=len(arrivals),
        new_demand=new_demand,
        completions=[(r.id, r.arrival_slot, r.first_service_slot, r.completion_slot) for r in finished],
    )
    if track_demand:
        out.outstanding_demand = outstanding_demand(state)
    state.slot += 1
    return out


def generate_arrivals(
    lam: float,
    slot_seconds: float,
    rng: np.random.Generator,
    process_kind: str = "poisson",
    size: Optional[int] = None,
    start_slot: int = 0,
):
    """Per-slot arrival counts with mean ``lam * slot_seconds``.

    ``deterministic`` releases ``floor((t+1)r) - floor(t r)`` in slot ``t`` so
    the long-run mean is exactly ``r``; it ignores ``rng``.  With ``size`` the
    counts for slots ``start_slot .. start_slot+size-1`` come back as an array.
    """
    if lam < 0 or not math.isfinite(lam):
        raise ValueError(f"arrival rate must be a finite number >= 0, got {lam}")
    if slot_seconds <= 0:
        raise ValueError(f"slot_seconds must be positive, got {slot_seconds}")
    n = 1 if size is None else size
    rate = lam * slot_seconds
    if rate == 0:
        counts = np.zeros(n, dtype=np.int64)
    elif process_kind == "poisson":
        counts = rng.poisson(rate, size=n).astype(np.int64)
    elif process_kind == "bernoulli":
        trials = math.ceil(rate) + 1
        counts = rng.binomial(trials, rate / trials, size=n).astype(np.int64)
    elif process_kind == "deterministic":
        t = np.arange(start_slot, start_slot + n + 1, dtype=np.float64)
        # the epsilon keeps rate = 1/b from losing a release to rounding
        cum = np.floor(t * rate + 1e-9).astype(np.int64)
        counts = np.diff(cum)
    else:
        raise ValueError(f"process_kind must be one of {PROCESS_KINDS}, got {process_kind!r}")
    return int(counts[0]) if size is None else counts


def reference_run(
    arrival_slot: np.ndarray,
    s: np.ndarray,
    o: np.ndarray,
    memory_limit: int,
    chunk: int,
    policy: str = "fcfs",
    swap: str = "free",
    slot_cap: int = 10**6,
    track_demand: bool = False,
) -> Tuple[List[SlotOutcome], List[RequestState], str]:
    """Drive :func:`advance_slot` over a fixed arrival stream.

    Slow but transparent; the fast kernel must reproduce it exactly.
    Returns ``(outcomes, requests, status)``.
    """
    state = EngineState(memory_limit=memory_limit, chunk_size=chunk, policy=policy, swap=swap)
    reqs = [
        RequestState.new(i, RequestSample(int(si), int(oi)), chunk, int(a))
        for i, (a, si, oi) in enumerate(zip(arrival_slot, s, o))
    ]
    n = len(reqs)
    outcomes: List[SlotOutcome] = []
    nxt = 0
    done = 0
    status = "drained"
    while done < n:
        if state.slot >= slot_cap:
            status = "capped"
            break
        batch = []
        while nxt < n and reqs[nxt].arrival_slot <= state.slot:
            batch.append(reqs[nxt])
            nxt += 1
        out = advance_slot(state, batch, track_demand=track_demand)
        outcomes.append(out)
        done += len(out.completions)
        if state.deadlocked:
            status = "deadlocked"
            break
    return outcomes, reqs, status


@dataclass
class RequestStream:
    """Requests in arrival order: slot of arrival and sizes."""

    arrival_slot: np.ndarray
    s: np.ndarray
    o: np.ndarray
    requested: int = -1

    def __post_init__(self) -> None:
        self.arrival_slot = np.asarray(self.arrival_slot, dtype=np.int64)
        self.s = np.asarray(self.s, dtype=np.int64)
        self.o = np.asarray(self.o, dtype=np.int64)
        if not (len(self.arrival_slot) == len(self.s) == len(self.o)):
            raise ValueError("stream columns must have equal length")
        if len(self.s) and (self.s.min() < 1 or self.o.min() < 1):
            raise WorkloadError("every request needs s >= 1 and o >= 1")
        if len(self.arrival_slot) and (np.diff(self.arrival_slot) < 0).any():
            raise ValueError("arrival slots must be nondecreasing")
        if self.requested < 0:
            self.requested = len(self.s)

    def __len__(self) -> int:
        return len(self.s)

    def subset(self, idx: np.ndarray) -> "RequestStream":
        return RequestStream(self.arrival_slot[idx], self.s[idx], self.o[idx])


def default_slot_cap(total_requests: int, lam: float, slot_seconds: float) -> int:
    """Twenty times the slots needed to see every arrival (or every request, if faster)."""
    per_slot = lam * slot_seconds
    if per_slot <= 0:
        return 20 * total_requests
    return math.ceil(20 * total_requests / min(per_slot, 1.0))


def generate_stream(
    spec: WorkloadSpec,
    lam: float,
    slot_seconds: float,
    total_requests: int,
    process_kind: str = "poisson",
    seed: int = 0,
    slot_cap: Optional[int] = None,
    block: int = 4096,
) -> RequestStream:
    """Sizes and arrival slots for ``total_requests`` requests.

    Sizes and arrivals use independent child streams of ``seed``, so request
    ``k`` has the same size whatever the arrival process.  Arrivals that would
    land at or beyond ``slot_cap`` are dropped.
    """
    if total_requests < 1:
        raise ValueError("total_requests must be >= 1")
    if slot_cap is None:
        slot_cap = default_slot_cap(total_requests, lam, slot_seconds)
    size_seq, arrival_seq = np.random.SeedSequence(seed).spawn(2)
    s, o = sample_requests(spec, np.random.default_rng(size_seq), total_requests)
    rng = np.random.default_rng(arrival_seq)
    slots = []
    have = 0
    start = 0
    while have < total_requests and start < slot_cap:
        counts = generate_arrivals(lam, slot_seconds, rng, process_kind, size=block, start_slot=start)
        slots.append(np.repeat(np.arange(start, start + block, dtype=np.int64), counts))
        have += int(counts.sum())
        start += block
    arrival = np.concatenate(slots) if slots else np.zeros(0, dtype=np.int64)
    arrival = arrival[arrival < slot_cap][:total_requests]
    n = len(arrival)
    return RequestStream(arrival, s[:n], o[:n], requested=total_requests)


@dataclass
class ReplicaRun:
    """Result of one replica run, stored column-wise.

    ``slots`` maps each :data:`~kvqueue._kernel.SLOT_COLUMNS` name to a per-slot
    array; ``requests`` holds ``id, s, o, arrival_slot, first_service_slot,
    completion_slot`` with -1 for "never happened".
    """

    slots: dict
    requests: dict
    status: str
    memory_limit: int
    chunk_size: int
    slot_seconds: float
    requested: int

    @property
    def num_slots(self) -> int:
        return len(self.slots["memory_used"])

    @property
    def completed(self) -> int:
        return int((self.requests["completion_slot"] >= 0).sum())

    @property
    def arrival_horizon(self) -> int:
        """Slots up to and including the last arrival."""
        arr = self.requests["arrival_slot"]
        return int(arr[-1]) + 1 if len(arr) else 0

    def outcome(self, t: int) -> SlotOutcome:
        col = {name: int(v[t]) for name, v in self.slots.items()}
        comp = self.requests["completion_slot"] == t
        req = self.requests
        return SlotOutcome(
            slot=t,
            memory_used=col["memory_used"],
            occupancy_peak=col["occupancy_peak"],
            occupancy_end=col["occupancy_end"],
            queue_len=col["queue_len"],
            in_progress_count=col["in_progress"],
            swapped_count=col["swapped"],
            admissions=col["admissions"],
            arrivals=col["arrivals"],
            new_demand=col["new_demand"],
            completions=[
                (int(i), int(a), int(f), int(c))
                for i, a, f, c in zip(
                    req["id"][comp], req["arrival_slot"][comp], req["first_service_slot"][comp], req["completion_slot"][comp]
                )
            ],
            outstanding_demand=col["outstanding_demand"] if col["outstanding_demand"] >= 0 else None,
        )


def _sjf_keys(s: np.ndarray, o: np.ndarray, chunk: int) -> np.ndarray:
    sf = s.astype(np.float64)
    of = o.astype(np.float64)
    # same operation order as lifetime_footprint so ties break identically
    return ((1.0 + sf / chunk) * sf + 2.0 * of * sf + (1.0 + of) * of) / 2.0


def simulate_stream(
    stream: RequestStream,
    memory_limit: int,
    chunk: int,
    slot_seconds: float = 1.0,
    policy: str = "fcfs",
    swap: str = "free",
    slot_cap: Optional[int] = None,
    track_demand: bool = True,
    engine: str = "fast",
) -> ReplicaRun:
    """Run one replica over a fixed request stream."""
    from ._kernel import SLOT_COLUMNS, STATUS_NAMES, run_replica_kernel

    if policy not in POLICIES:
        raise ValueError(f"policy must be one of {POLICIES}, got {policy!r}")
    if swap not in SWAP_MODES:
        raise ValueError(f"swap must be one of {SWAP_MODES}, got {swap!r}")
    if memory_limit < 1 or chunk < 1:
        raise ValueError("memory_limit and chunk must be positive")
    n = len(stream)
    if n and int((stream.s + stream.o).max()) > memory_limit:
        worst = int(np.argmax(stream.s + stream.o))
        raise WorkloadError(
            f"request {worst} needs {int(stream.s[worst] + stream.o[worst])} tokens; M={memory_limit} can never hold it"
        )
    if slot_cap is None:
        slot_cap = 10**9
    if engine == "fast":
        rows, first, comp, code = run_replica_kernel(
            stream.arrival_slot,
            stream.s,
            stream.o,
            _sjf_keys(stream.s, stream.o, chunk),
            int(memory_limit),
            int(chunk),
            policy == "sjf",
            swap == "free",
            int(slot_cap),
            bool(track_demand),
        )
        slots = {name: np.ascontiguousarray(rows[:, i]) for i, name in enumerate(SLOT_COLUMNS)}
        status = STATUS_NAMES[int(code)]
    elif engine == "reference":
        outcomes, reqs, status = reference_run(
            stream.arrival_slot, stream.s, stream.o, memory_limit, chunk, policy, swap, slot_cap, track_demand
        )
        slots = _columns(outcomes)
        first = np.array([-1 if r.first_service_slot is None else r.first_service_slot for r in reqs], dtype=np.int64)
        comp = np.array([-1 if r.completion_slot is None else r.completion_slot for r in reqs], dtype=np.int64)
    else:
        raise ValueError(f"engine must be 'fast' or 'reference', got {engine!r}")
    if status == "drained" and len(stream) < stream.requested:
        status = "capped"
    requests = {
        "id": np.arange(n, dtype=np.int64),
        "s": stream.s.copy(),
        "o": stream.o.copy(),
        "arrival_slot": stream.arrival_slot.copy(),
        "first_service_slot": np.asarray(first, dtype=np.int64),
        "completion_slot": np.asarray(comp, dtype=np.int64),
    }
    return ReplicaRun(slots, requests, status, int(memory_limit), int(chunk), float(slot_seconds), stream.requested)


def _columns(outcomes: Sequence[SlotOutcome]) -> dict:
    def col(get):
        return np.array([get(x) for x in outcomes], dtype=np.int64)

    return {
        "memory_used": col(lambda x: x.memory_used),
        "occupancy_peak": col(lambda x: x.occupancy_peak),
        "occupancy_end": col(lambda x: x.occupancy_end),
        "queue_len": col(lambda x: x.queue_len),
        "in_progress": col(lambda x: x.in_progress_count),
        "swapped": col(lambda x: x.swapped_count),
        "admissions": col(lambda x: x.admissions),
        "arrivals": col(lambda x: x.arrivals),
        "completions": col(lambda x: len(x.completions)),
        "new_demand": col(lambda x: x.new_demand),
        "outstanding_demand": col(lambda x: -1 if x.outstanding_demand is None else x.outstanding_demand),
    }


def run_replica(
    spec: WorkloadSpec,
    memory_limit: int,
    lam: float,
    slot_seconds: float,
    total_requests: int,
    policy: str = "fcfs",
    process_kind: str = "poisson",
    seed: int = 0,
    slot_cap: Optional[int] = None,
    swap: str = "free",
    track_demand: bool = True,
    engine: str = "fast",
) -> ReplicaRun:
    """Simulate one replica until the last of ``total_requests`` completes or the slot cap hits."""
    if slot_cap is None:
        slot_cap = default_slot_cap(total_requests, lam, slot_seconds)
    stream = generate_stream(spec, lam, slot_seconds, total_requests, process_kind, seed, slot_cap)
    return simulate_stream(
        stream, memory_limit, spec.chunk_size, slot_seconds, policy, swap, slot_cap, track_demand, engine
    )
