"""Compiled whole-run loop for one replica.

Same batching rules as :func:`kvqueue.sim_core.form_batch`, on flat arrays.
Requests must be ordered by arrival slot (ids are positions in the arrays).
"""

from __future__ import annotations

import numpy as np
from numba import njit

STATUS_DRAINED = 0
STATUS_CAPPED = 1
STATUS_DEADLOCKED = 2
STATUS_NAMES = {STATUS_DRAINED: "drained", STATUS_CAPPED: "capped", STATUS_DEADLOCKED: "deadlocked"}

# column order of the per-slot output matrix
SLOT_COLUMNS = (
    "memory_used",
    "occupancy_peak",
    "occupancy_end",
    "queue_len",
    "in_progress",
    "swapped",
    "admissions",
    "arrivals",
    "completions",
    "new_demand",
    "outstanding_demand",
)
_NCOL = len(SLOT_COLUMNS)


@njit(cache=True)
def _less(key, a, b):
    return key[a] < key[b] or (key[a] == key[b] and a < b)


@njit(cache=True)
def _heap_push(heap, size, item, key):
    heap[size] = item
    i = size
    while i > 0:
        parent = (i - 1) // 2
        if _less(key, heap[i], heap[parent]):
            heap[i], heap[parent] = heap[parent], heap[i]
            i = parent
        else:
            break
    return size + 1


@njit(cache=True)
def _heap_pop(heap, size, key):
    top = heap[0]
    size -= 1
    heap[0] = heap[size]
    i = 0
    while True:
        left = 2 * i + 1
        right = left + 1
        best = i
        if left < size and _less(key, heap[left], heap[best]):
            best = left
        if right < size and _less(key, heap[right], heap[best]):
            best = right
        if best == i:
            break
        heap[i], heap[best] = heap[best], heap[i]
        i = best
    return top, size


@njit(cache=True)
def remaining_demand(s, o, c, d, k, chunk):
    """Sum of end-of-advance footprints of every unit not yet processed."""
    total = 0
    if c < k:
        # chunks c+1 .. k-1 end at j*chunk, chunk k ends at s
        total += chunk * ((k - 1) * k // 2 - c * (c + 1) // 2) + s
    total += (o - d) * s + (o * (o + 1) - d * (d + 1)) // 2
    return total


@njit(cache=True)
def run_replica_kernel(arr_slot, s, o, key, memory, chunk, sjf, swap, slot_cap, track):
    n = s.shape[0]
    k = (s + chunk - 1) // chunk
    exact = np.empty(n, dtype=np.int64)
    for r in range(n):
        exact[r] = remaining_demand(s[r], o[r], 0, 0, k[r], chunk)

    c = np.zeros(n, dtype=np.int64)
    d = np.zeros(n, dtype=np.int64)
    fp = np.zeros(n, dtype=np.int64)
    resident = np.zeros(n, dtype=np.bool_)
    first = np.full(n, -1, dtype=np.int64)
    comp = np.full(n, -1, dtype=np.int64)

    running = np.empty(n, dtype=np.int64)
    n_run = 0
    heap = np.empty(n, dtype=np.int64)
    heap_size = 0
    head = 0  # FCFS queue is ids head .. arrived-1

    rows = np.zeros((1024, _NCOL), dtype=np.int64)
    t = 0
    arrived = 0
    done = 0
    occ = 0
    waiting_demand = 0
    status = STATUS_DRAINED

    while done < n:
        if t >= slot_cap:
            status = STATUS_CAPPED
            break
        if t >= rows.shape[0]:
            grown = np.zeros((rows.shape[0] * 2, _NCOL), dtype=np.int64)
            grown[: rows.shape[0]] = rows
            rows = grown

        n_arr = 0
        new_demand = 0
        while arrived < n and arr_slot[arrived] <= t:
            if sjf:
                heap_size = _heap_push(heap, heap_size, arrived, key)
            waiting_demand += exact[arrived]
            new_demand += exact[arrived]
            arrived += 1
            n_arr += 1

        used = 0
        n_adv = 0
        n_comp = 0
        for i in range(n_run):
            r = running[i]
            if c[r] < k[r]:
                cost = min((c[r] + 1) * chunk, s[r])
            else:
                cost = s[r] + d[r] + 1
            need = cost - fp[r] if resident[r] else cost
            if occ + need > memory and swap:
                j = n_run - 1
                while occ + need > memory and j > i:
                    v = running[j]
                    if resident[v]:
                        resident[v] = False
                        occ -= fp[v]
                    j -= 1
            if occ + need <= memory:
                occ += need
                fp[r] = cost
                resident[r] = True
                used += cost
                n_adv += 1
                if c[r] < k[r]:
                    c[r] += 1
                else:
                    d[r] += 1
                    if d[r] == o[r]:
                        comp[r] = t
                        n_comp += 1

        n_adm = 0
        while True:
            if sjf:
                if heap_size == 0:
                    break
                h = heap[0]
            else:
                if head >= arrived:
                    break
                h = head
            cost = min(chunk, s[h])
            if occ + cost > memory:
                break
            if sjf:
                h, heap_size = _heap_pop(heap, heap_size, key)
            else:
                head += 1
            occ += cost
            fp[h] = cost
            resident[h] = True
            c[h] = 1
            first[h] = t
            used += cost
            waiting_demand -= exact[h]
            n_adm += 1
            if sjf:
                pos = n_run
                while pos > 0 and _less(key, h, running[pos - 1]):
                    running[pos] = running[pos - 1]
                    pos -= 1
                running[pos] = h
            else:
                running[n_run] = h
            n_run += 1

        occ_peak = occ
        had_running = n_run - n_adm > 0
        if n_comp > 0:
            w = 0
            for i in range(n_run):
                r = running[i]
                if comp[r] == t:
                    occ -= fp[r]
                    resident[r] = False
                else:
                    running[w] = r
                    w += 1
            n_run = w
            done += n_comp

        n_swapped = 0
        demand = -1
        if track:
            demand = waiting_demand
        for i in range(n_run):
            r = running[i]
            if not resident[r]:
                n_swapped += 1
            if track:
                demand += remaining_demand(s[r], o[r], c[r], d[r], k[r], chunk)

        row = rows[t]
        row[0] = used
        row[1] = occ_peak
        row[2] = occ
        row[3] = heap_size if sjf else arrived - head
        row[4] = n_run
        row[5] = n_swapped
        row[6] = n_adm
        row[7] = n_arr
        row[8] = n_comp
        row[9] = new_demand
        row[10] = demand
        t += 1
        if had_running and n_adv == 0 and not swap:
            status = STATUS_DEADLOCKED
            break

    return rows[:t].copy(), first, comp, status
