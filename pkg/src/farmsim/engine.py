"""Discrete-event simulation core.

One replication is a single-threaded event loop over a (time, sequence)
priority queue, driven from the empty state.  Arrivals are Poisson streams
or an explicit timestamp list; service follows processor sharing or SRPT
with exact residual advancement (no time discretization), so heavy-tailed
sizes are handled without memoryless shortcuts.  Every random draw comes
from a named counter-split stream keyed by (seed, purpose, type), so the
arrival and size sample paths are identical across policies and disciplines
for a given seed, enabling paired comparisons.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .model import Scenario, SizeDistribution
from . import policy as policy_mod

_ARRIVAL = 0
_DEPARTURE = 1
_RESIDUAL_SLACK = -1e-9


class SimulationError(RuntimeError):
    """Event calendar corruption or an inconsistent runtime state."""


def _stream(seed: int, *tag: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *tag])))


class _Tape:
    """Block-buffered uniform draws from one named stream, as python floats."""

    __slots__ = ("_gen", "_block", "_buf", "_i")

    def __init__(self, gen, block=8192):
        self._gen = gen
        self._block = block
        self._buf = gen.random(block).tolist()
        self._i = 0

    def u(self) -> float:
        i = self._i
        if i >= self._block:
            self._buf = self._gen.random(self._block).tolist()
            i = 0
        self._i = i + 1
        return self._buf[i]


def size_from_uniform(dist: SizeDistribution, u: float) -> float:
    """Inverse-CDF transform of one uniform draw; shared across distributions
    so runs with different size laws stay coupled on the same uniforms."""
    if dist.kind == "exp":
        return -math.log(1.0 - u)
    if dist.kind == "det":
        return 1.0
    return dist.pareto_scale * (1.0 - u) ** (-1.0 / dist.shape)


def sample_job_size(dist: SizeDistribution, rng: np.random.Generator) -> float:
    """One unit-mean job size."""
    return size_from_uniform(dist, float(rng.random()))


def poisson_arrivals(lam: float, rng: np.random.Generator):
    """Generator of successive event times of a rate-lam Poisson process."""
    if not lam > 0:
        raise ValueError("arrival rate must be positive")
    t = 0.0
    while True:
        t += rng.exponential(1.0 / lam)
        yield t


class ServerRuntime:
    """Residual job sizes and scheduling bookkeeping for one server."""

    __slots__ = ("sid", "group_pos", "mu", "buffer", "jobs", "last_update", "version")

    def __init__(self, sid, group_pos, mu, buffer):
        self.sid = sid
        self.group_pos = group_pos
        self.mu = mu
        self.buffer = buffer
        self.jobs = []  # entries [residual, type_index, original_size]
        self.last_update = 0.0
        self.version = 0


def ps_reschedule(server: ServerRuntime, now: float) -> float | None:
    """Advance all residuals under equal sharing and return the next departure.

    Each resident job was served at rate mu/n since the last update.  The
    next departure happens after the smallest residual is drained at the
    post-event sharing rate, i.e. at now + n * min(residual) / mu.
    """
    jobs = server.jobs
    n = len(jobs)
    dt = now - server.last_update
    if dt < 0:
        raise SimulationError("nonmonotone server update time")
    if n and dt > 0.0:
        dec = dt * server.mu / n
        for job in jobs:
            job[0] -= dec
            if job[0] < _RESIDUAL_SLACK:
                raise SimulationError(f"negative residual {job[0]} on server {server.sid}")
    server.last_update = now
    if not jobs:
        return None
    m = jobs[0][0]
    for job in jobs:
        if job[0] < m:
            m = job[0]
    if m < 0.0:
        m = 0.0
    return now + len(jobs) * m / server.mu


def srpt_reschedule(server: ServerRuntime, now: float) -> float | None:
    """Advance only the smallest residual at full rate and return the next departure.

    A newly arrived smaller job preempts simply by becoming the minimum.
    """
    jobs = server.jobs
    dt = now - server.last_update
    if dt < 0:
        raise SimulationError("nonmonotone server update time")
    if jobs and dt > 0.0:
        mi = 0
        m = jobs[0][0]
        for i in range(1, len(jobs)):
            if jobs[i][0] < m:
                m = jobs[i][0]
                mi = i
        jobs[mi][0] = m - dt * server.mu
        if jobs[mi][0] < _RESIDUAL_SLACK:
            raise SimulationError(
                f"negative residual {jobs[mi][0]} on server {server.sid}"
            )
    server.last_update = now
    if not jobs:
        return None
    m = jobs[0][0]
    for job in jobs:
        if job[0] < m:
            m = job[0]
    if m < 0.0:
        m = 0.0
    return now + m / server.mu


@dataclass
class Metrics:
    """Time-average statistics of one replication over (warmup, horizon]."""

    window: float
    throughput: float
    power: float
    energy_efficiency: float
    blocking: dict
    arrivals: dict
    blocked: dict
    completions: dict
    completed_work: float
    delivered_work: float
    busy_time: dict
    in_system: dict
    seed: int
    occupancy_avg: dict | None = None
    hourly: list | None = None


@dataclass
class Summary:
    """Replication aggregate: sample means with 95% Student-t half-widths."""

    n_reps: int
    window: float
    throughput: float
    throughput_hw: float
    power: float
    power_hw: float
    energy_efficiency: float
    energy_efficiency_hw: float
    blocking: dict
    blocking_hw: dict
    unconverged: bool
    reps: list = field(repr=False, default_factory=list)


def run(
    scenario: Scenario,
    policy: str = "pas",
    *,
    horizon: float,
    warmup: float | None = None,
    seed: int = 0,
    arrivals=None,
    collect_occupancy: bool = False,
    bucket_width: float | None = None,
) -> Metrics:
    """Simulate one replication from the empty state.

    arrivals ... None for Poisson streams at the scenario's scaled rates, or
                 a time-sorted list of (timestamp, type_id) pairs.
    Statistics are time integrals over (warmup, horizon] divided by the
    window length; warmup defaults to 10% of the horizon.
    """
    if warmup is None:
        warmup = 0.1 * horizon
    if not horizon > warmup >= 0:
        raise ValueError("need horizon > warmup >= 0")
    window = horizon - warmup

    state = policy_mod.PolicyState(
        scenario,
        track_levels=(policy == "jsq" or scenario.tie_break == "sqtb"),
    )
    groups = sorted(scenario.groups, key=lambda g: g.id)
    n_groups = len(groups)
    mu_g = [g.mu for g in groups]
    servers = []
    for gpos, g in enumerate(groups):
        for _ in range(scenario.scaled_count(g)):
            servers.append(ServerRuntime(len(servers), gpos, g.mu, g.buffer))

    types = sorted(scenario.job_types, key=lambda t: t.id)
    type_ids = [t.id for t in types]
    tindex = {t.id: i for i, t in enumerate(types)}
    size_tapes = [_Tape(_stream(seed, 1, t.id)) for t in types]
    dists = [t.size_dist for t in types]

    reschedule = ps_reschedule if scenario.discipline == "ps" else srpt_reschedule

    heap = []
    seq = 0
    if arrivals is None:
        arr_tapes = [_Tape(_stream(seed, 0, t.id)) for t in types]
        rates = [scenario.scaled_rate(t) for t in types]
        for j in range(len(types)):
            t0 = -math.log(1.0 - arr_tapes[j].u()) / rates[j]
            heap.append((t0, seq, _ARRIVAL, j, 0))
            seq += 1
        heapq.heapify(heap)
        trace_iter = None
    else:
        arr_tapes = None
        trace_iter = iter(arrivals)
        first = next(trace_iter, None)
        if first is not None:
            ts, tid = first
            heap.append((float(ts), seq, _ARRIVAL, tindex[tid], 0))
            seq += 1

    # counters (full run and in-window)
    J = len(types)
    arrivals_all = [0] * J
    blocked_all = [0] * J
    completions_all = [0] * J
    arrivals_w = [0] * J
    blocked_w = [0] * J
    completions_w = [0] * J
    completed_work = 0.0
    busy_time = [0.0] * n_groups
    busy_since = [0.0] * len(servers)

    n_buckets = int(math.ceil(horizon / bucket_width)) if bucket_width else 0
    if n_buckets:
        b_work = [0.0] * n_buckets
        b_busy = [[0.0] * n_buckets for _ in range(n_groups)]
        b_arrivals = [[0] * n_buckets for _ in range(J)]
        b_blocked = [[0] * n_buckets for _ in range(J)]

    if collect_occupancy:
        occ_acc = {
            (g.id, n): 0.0 for g in groups for n in range(g.buffer + 1)
        }
        t_prev = 0.0

    def add_busy(gpos, a, b):
        lo = a if a > warmup else warmup
        hi = b if b < horizon else horizon
        if hi > lo:
            busy_time[gpos] += hi - lo
        if n_buckets and b > a:
            i0 = min(int(a / bucket_width), n_buckets - 1)
            i1 = min(int(b / bucket_width), n_buckets - 1) if b < horizon else n_buckets - 1
            for i in range(i0, i1 + 1):
                s = max(a, i * bucket_width)
                e = min(b, (i + 1) * bucket_width, horizon)
                if e > s:
                    b_busy[gpos][i] += e - s

    now = 0.0
    while heap and heap[0][0] <= horizon:
        ev_t, _, kind, a, b = heapq.heappop(heap)
        if ev_t < now:
            raise SimulationError("event calendar time went backwards")
        if collect_occupancy and ev_t > t_prev:
            lo = max(t_prev, warmup)
            hi = min(ev_t, horizon)
            if hi > lo:
                w = hi - lo
                counts = state.occ_count
                for gpos, g in enumerate(groups):
                    row = counts[gpos]
                    for n in range(g.buffer + 1):
                        if row[n]:
                            occ_acc[(g.id, n)] += row[n] * w
            t_prev = ev_t
        now = ev_t

        if kind == _ARRIVAL:
            j = a
            # keep the arrival stream flowing
            if trace_iter is None:
                gap = -math.log(1.0 - arr_tapes[j].u()) / rates[j]
                heapq.heappush(heap, (now + gap, seq, _ARRIVAL, j, 0))
                seq += 1
            else:
                nxt = next(trace_iter, None)
                if nxt is not None:
                    heapq.heappush(heap, (float(nxt[0]), seq, _ARRIVAL, tindex[nxt[1]], 0))
                    seq += 1
            size = size_from_uniform(dists[j], size_tapes[j].u())
            arrivals_all[j] += 1
            in_window = now > warmup
            if in_window:
                arrivals_w[j] += 1
            if n_buckets:
                b_arrivals[j][min(int(now / bucket_width), n_buckets - 1)] += 1

            sid = policy_mod.assign(state, type_ids[j], policy)
            if sid is policy_mod.BLOCKED:
                blocked_all[j] += 1
                if in_window:
                    blocked_w[j] += 1
                if n_buckets:
                    b_blocked[j][min(int(now / bucket_width), n_buckets - 1)] += 1
                continue
            srv = servers[sid]
            if not srv.jobs:
                busy_since[sid] = now
            next_dep = reschedule(srv, now)  # advance before the job joins
            srv.jobs.append([size, j, size])
            policy_mod.record_arrival(state, sid)
            next_dep = reschedule(srv, now)
            srv.version += 1
            heapq.heappush(heap, (next_dep, seq, _DEPARTURE, sid, srv.version))
            seq += 1
        else:
            sid = a
            srv = servers[sid]
            if b != srv.version:
                continue  # superseded schedule
            reschedule(srv, now)
            jobs = srv.jobs
            mi = 0
            m = jobs[0][0]
            for i in range(1, len(jobs)):
                if jobs[i][0] < m:
                    m = jobs[i][0]
                    mi = i
            done = jobs.pop(mi)
            j = done[1]
            completions_all[j] += 1
            if now > warmup:
                completions_w[j] += 1
                completed_work += done[2]
            if n_buckets:
                b_work[min(int(now / bucket_width), n_buckets - 1)] += done[2]
            policy_mod.record_departure(state, sid)
            if jobs:
                next_dep = reschedule(srv, now)
                srv.version += 1
                heapq.heappush(heap, (next_dep, seq, _DEPARTURE, sid, srv.version))
                seq += 1
            else:
                srv.version += 1
                add_busy(srv.group_pos, busy_since[sid], now)

    # close the books at the horizon
    if collect_occupancy and horizon > t_prev:
        lo = max(t_prev, warmup)
        if horizon > lo:
            w = horizon - lo
            for gpos, g in enumerate(groups):
                row = state.occ_count[gpos]
                for n in range(g.buffer + 1):
                    if row[n]:
                        occ_acc[(g.id, n)] += row[n] * w
    in_system = [0] * J
    for srv in servers:
        if srv.jobs:
            add_busy(srv.group_pos, busy_since[srv.sid], horizon)
            for job in srv.jobs:
                in_system[job[1]] += 1

    energy = 0.0
    for gpos, g in enumerate(groups):
        count = scenario.scaled_count(g)
        energy += g.eps_busy * busy_time[gpos] + g.eps_idle * (window * count - busy_time[gpos])
    power = energy / window
    throughput = completed_work / window
    delivered = sum(mu_g[gp] * busy_time[gp] for gp in range(n_groups))

    hourly = None
    if n_buckets:
        hourly = []
        for i in range(n_buckets):
            b_lo = i * bucket_width
            b_hi = min((i + 1) * bucket_width, horizon)
            dur = b_hi - b_lo
            e = 0.0
            for gpos, g in enumerate(groups):
                count = scenario.scaled_count(g)
                e += g.eps_busy * b_busy[gpos][i] + g.eps_idle * (dur * count - b_busy[gpos][i])
            arr = sum(b_arrivals[j][i] for j in range(J))
            blk = sum(b_blocked[j][i] for j in range(J))
            hourly.append(
                {
                    "bucket": i,
                    "throughput": b_work[i] / dur if dur > 0 else 0.0,
                    "power": e / dur if dur > 0 else 0.0,
                    "energy_efficiency": (b_work[i] / e) if e > 0 else 0.0,
                    "arrivals": arr,
                    "blocked": blk,
                    "blocking": blk / arr if arr else 0.0,
                    "blocked_per_type": {type_ids[j]: b_blocked[j][i] for j in range(J)},
                }
            )

    occupancy_avg = None
    if collect_occupancy:
        denom = scenario.s0 * scenario.h * window
        occupancy_avg = {key: v / denom for key, v in occ_acc.items()}

    def per_type(values):
        return {type_ids[j]: values[j] for j in range(J)}

    blocking = {
        type_ids[j]: (blocked_w[j] / arrivals_w[j] if arrivals_w[j] else 0.0)
        for j in range(J)
    }
    return Metrics(
        window=window,
        throughput=throughput,
        power=power,
        energy_efficiency=throughput / power if power > 0 else 0.0,
        blocking=blocking,
        arrivals=per_type(arrivals_all),
        blocked=per_type(blocked_all),
        completions=per_type(completions_all),
        completed_work=completed_work,
        delivered_work=delivered,
        busy_time={groups[gp].id: busy_time[gp] for gp in range(n_groups)},
        in_system=per_type(in_system),
        seed=seed,
        occupancy_avg=occupancy_avg,
        hourly=hourly,
    )


def _t_halfwidth(values) -> float:
    n = len(values)
    if n < 2:
        return float("inf")
    sd = float(np.std(values, ddof=1))
    if sd == 0.0:
        return 0.0
    return float(stats.t.ppf(0.975, n - 1)) * sd / math.sqrt(n)


def summarize(reps: list, ci_target: float = 0.03) -> Summary:
    """Aggregate replications; unconverged when any primary half-width exceeds
    ci_target times its mean."""
    ee = [m.energy_efficiency for m in reps]
    th = [m.throughput for m in reps]
    pw = [m.power for m in reps]
    type_ids = list(reps[0].blocking.keys())
    blocking = {tid: float(np.mean([m.blocking[tid] for m in reps])) for tid in type_ids}
    blocking_hw = {tid: _t_halfwidth([m.blocking[tid] for m in reps]) for tid in type_ids}
    unconverged = False
    for vals in (ee, th, pw):
        mean = float(np.mean(vals))
        hw = _t_halfwidth(vals)
        if mean > 0 and hw > ci_target * mean:
            unconverged = True
    return Summary(
        n_reps=len(reps),
        window=reps[0].window,
        throughput=float(np.mean(th)),
        throughput_hw=_t_halfwidth(th),
        power=float(np.mean(pw)),
        power_hw=_t_halfwidth(pw),
        energy_efficiency=float(np.mean(ee)),
        energy_efficiency_hw=_t_halfwidth(ee),
        blocking=blocking,
        blocking_hw=blocking_hw,
        unconverged=unconverged,
        reps=reps,
    )


def rep_seeds(seed: int, n: int) -> list:
    """Deterministic replication seeds derived from one master seed."""
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n, np.uint32)]


def replications(
    scenario: Scenario,
    policy: str,
    n_reps: int,
    *,
    horizon: float,
    warmup: float | None = None,
    seed: int = 0,
    ci_target: float = 0.03,
    max_reps: int | None = None,
    **run_kwargs,
) -> Summary:
    """Run replications with distinct derived seeds and aggregate them.

    The replication count grows (in steps of the initial count) until the 95%
    half-widths of throughput, power and energy efficiency all fall within
    ci_target of their means, or max_reps is hit, in which case the summary
    is flagged unconverged.
    """
    if n_reps < 2:
        raise ValueError("need at least two replications for a t-interval")
    if max_reps is None:
        max_reps = 4 * n_reps
    seeds = rep_seeds(seed, max_reps)
    reps = [
        run(scenario, policy, horizon=horizon, warmup=warmup, seed=s, **run_kwargs)
        for s in seeds[:n_reps]
    ]
    summary = summarize(reps, ci_target)
    while summary.unconverged and len(reps) + n_reps <= max_reps:
        for s in seeds[len(reps): len(reps) + n_reps]:
            reps.append(run(scenario, policy, horizon=horizon, warmup=warmup, seed=s, **run_kwargs))
        summary = summarize(reps, ci_target)
    return summary
