"""Assignment policies over binary server-fullness information.

PAS sends each arriving job to a non-full available server with the highest
effective energy efficiency; JSQ sends it to a non-full available server with
the fewest resident jobs.  All servers of a group share one efficiency key,
so the per-type priority structure reduces to a fixed ladder of groups plus
per-group vacancy bookkeeping; the server-level refinement (lowest label or
shortest queue) is resolved inside the chosen group.  Every selection matches
a naive argmax scan under the same tie-break.
"""

from __future__ import annotations

import heapq

from .model import Scenario, effective_energy_efficiency

BLOCKED = None


class PolicyInvariantError(RuntimeError):
    """Internal bookkeeping was driven outside its preconditions."""


class PolicyState:
    """Occupancy counts plus the vacancy structures both dispatchers share.

    Servers carry global ids 0..N-1, allocated contiguously in ascending
    group-id order, so the smallest id inside a group range is also the
    smallest global id among that group's servers.
    """

    def __init__(self, scenario: Scenario, track_levels: bool | None = None):
        self.scenario = scenario
        # per-level id heaps are only consulted by sqtb and jsq selections;
        # skip their upkeep otherwise so long lltb runs stay lean
        if track_levels is None:
            track_levels = scenario.tie_break == "sqtb"
        self.track_levels = track_levels
        groups = sorted(scenario.groups, key=lambda g: g.id)
        self.group_ids = [g.id for g in groups]
        self.buffers = [g.buffer for g in groups]
        self.eff = [effective_energy_efficiency(g) for g in groups]
        self.counts = [scenario.scaled_count(g) for g in groups]

        self.starts = []
        self.ends = []
        n = 0
        for c in self.counts:
            self.starts.append(n)
            n += c
            self.ends.append(n)
        self.n_servers = n
        self.group_of = []
        for gpos, c in enumerate(self.counts):
            self.group_of.extend([gpos] * c)

        self.occ = [0] * n
        # vacancy count per group and a lazy min-id heap of non-full servers
        self.vacancies = [c for c in self.counts]
        self.free_heap = [list(range(self.starts[g], self.ends[g]))
                          for g in range(len(groups))]
        self.in_free = [True] * n
        # per (group, occupancy level): lazy min-id heaps and exact counts
        self.occ_heap = [[[] for _ in range(b + 1)] for b in self.buffers]
        self.occ_count = [[0] * (b + 1) for b in self.buffers]
        for g, c in enumerate(self.counts):
            self.occ_heap[g][0] = list(range(self.starts[g], self.ends[g]))
            self.occ_count[g][0] = c

        # per type: group positions ordered by (descending efficiency, group id)
        by_type = {}
        for t in scenario.job_types:
            ladder = sorted(
                (g for g in range(len(groups)) if self.group_ids[g] in t.available_groups),
                key=lambda g: (-self.eff[g], self.group_ids[g]),
            )
            by_type[t.id] = tuple(ladder)
        self.ladders = by_type
        self.type_ids = [t.id for t in scenario.job_types]

    # -- queries -----------------------------------------------------------

    def group_id_of_server(self, sid: int) -> int:
        return self.group_ids[self.group_of[sid]]

    def occupancy(self, sid: int) -> int:
        return self.occ[sid]

    def occupancy_counts(self):
        """Exact number of servers per (group id, occupancy level)."""
        return {
            (self.group_ids[g], n): self.occ_count[g][n]
            for g in range(len(self.group_ids))
            for n in range(self.buffers[g] + 1)
        }

    def _min_free_id(self, g: int):
        """Smallest id of a non-full server in group g, or None."""
        heap = self.free_heap[g]
        b = self.buffers[g]
        while heap:
            sid = heap[0]
            if self.occ[sid] < b:
                return sid
            heapq.heappop(heap)
            self.in_free[sid] = False
        return None

    def _min_id_at_level(self, g: int, level: int):
        """Smallest id of a server in group g sitting at exactly `level` jobs."""
        if not self.track_levels:
            raise PolicyInvariantError(
                "per-level lookup requires a state built with track_levels=True"
            )
        heap = self.occ_heap[g][level]
        while heap:
            sid = heap[0]
            if self.occ[sid] == level:
                return sid
            heapq.heappop(heap)
        return None

    def _shortest_in_group(self, g: int):
        """(occupancy, id) of the emptiest non-full server in group g, or None."""
        for level in range(self.buffers[g]):
            if self.occ_count[g][level] > 0:
                sid = self._min_id_at_level(g, level)
                if sid is not None:
                    return level, sid
        return None


def pas_init(scenario: Scenario) -> PolicyState:
    """Bookkeeping for an empty system; every server is present and non-full."""
    return PolicyState(scenario)


def pas_assign(state: PolicyState, type_id: int):
    """Server for an arriving job of the given type under PAS, or BLOCKED.

    Among non-full available servers the selection maximizes effective energy
    efficiency; ties go to the smallest id (lltb) or the smallest occupancy
    then smallest id (sqtb).
    """
    ladder = state.ladders[type_id]
    tie = state.scenario.tie_break
    best_g = None
    for g in ladder:
        if state.vacancies[g] > 0:
            best_g = g
            break
    if best_g is None:
        return BLOCKED
    if tie == "lltb":
        sid = state._min_free_id(best_g)
        if sid is None:
            raise PolicyInvariantError("vacancy count positive but no free server")
        return sid
    # sqtb: consider every group tied at the maximal efficiency
    best_key = None
    best_sid = None
    for g in ladder:
        if state.eff[g] != state.eff[best_g]:
            if state.eff[g] < state.eff[best_g]:
                break
            continue
        if state.vacancies[g] == 0:
            continue
        found = state._shortest_in_group(g)
        if found is None:
            raise PolicyInvariantError("vacancy count positive but no free server")
        level, sid = found
        if best_key is None or (level, sid) < best_key:
            best_key = (level, sid)
            best_sid = sid
    return best_sid


def jsq_assign(state: PolicyState, type_id: int):
    """Non-full available server with the fewest resident jobs (smallest id on ties)."""
    best_key = None
    best_sid = None
    for g in state.ladders[type_id]:
        if state.vacancies[g] == 0:
            continue
        found = state._shortest_in_group(g)
        if found is None:
            raise PolicyInvariantError("vacancy count positive but no free server")
        if best_key is None or found < best_key:
            best_key = found
            best_sid = found[1]
    if best_sid is None:
        return BLOCKED
    return best_sid


def assign(state: PolicyState, type_id: int, policy: str):
    if policy == "pas":
        return pas_assign(state, type_id)
    if policy == "jsq":
        return jsq_assign(state, type_id)
    raise ValueError(f"unknown policy {policy!r}")


def updating_upon_arrival(state: PolicyState, sid: int) -> None:
    """Handle a server that has just become full: drop it from the candidate pool.

    Must be called exactly when the server's occupancy reached its buffer.
    """
    g = state.group_of[sid]
    if state.occ[sid] != state.buffers[g]:
        raise PolicyInvariantError(
            f"server {sid} is not full (occupancy {state.occ[sid]})"
        )
    if state.vacancies[g] <= 0:
        raise PolicyInvariantError(f"group {state.group_ids[g]} vacancy underflow")
    state.vacancies[g] -= 1
    # the stale free-heap entry is discarded lazily on the next lookup


def updating_upon_departure(state: PolicyState, sid: int) -> None:
    """Handle a server that has just left the full state: restore it to the pool.

    Must be called exactly when the server's occupancy dropped to buffer - 1.
    """
    g = state.group_of[sid]
    if state.occ[sid] != state.buffers[g] - 1:
        raise PolicyInvariantError(
            f"server {sid} did not just leave the full state (occupancy {state.occ[sid]})"
        )
    if state.vacancies[g] >= state.counts[g]:
        raise PolicyInvariantError(f"group {state.group_ids[g]} vacancy overflow")
    state.vacancies[g] += 1
    if not state.in_free[sid]:
        heapq.heappush(state.free_heap[g], sid)
        state.in_free[sid] = True


def record_arrival(state: PolicyState, sid: int) -> None:
    """Account for one job starting service on the server."""
    g = state.group_of[sid]
    b = state.buffers[g]
    n = state.occ[sid]
    if n >= b:
        raise PolicyInvariantError(f"server {sid} accepted a job while full")
    state.occ[sid] = n + 1
    state.occ_count[g][n] -= 1
    state.occ_count[g][n + 1] += 1
    if n + 1 < b:
        if state.track_levels:
            heapq.heappush(state.occ_heap[g][n + 1], sid)
    else:
        updating_upon_arrival(state, sid)


def record_departure(state: PolicyState, sid: int) -> None:
    """Account for one job leaving the server."""
    g = state.group_of[sid]
    b = state.buffers[g]
    n = state.occ[sid]
    if n <= 0:
        raise PolicyInvariantError(f"server {sid} departure from empty server")
    state.occ[sid] = n - 1
    state.occ_count[g][n] -= 1
    state.occ_count[g][n - 1] += 1
    if state.track_levels:
        heapq.heappush(state.occ_heap[g][n - 1], sid)
    if n == b:
        updating_upon_departure(state, sid)


def indication_vector(state: PolicyState) -> dict:
    """Current PAS choice per type: the server an arrival would get right now."""
    return {tid: pas_assign(state, tid) for tid in state.type_ids}
