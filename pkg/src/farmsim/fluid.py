"""Analytic benchmark for the assignment problem.

Provides the per-server birth-death law, the availability loads that define
the heavy-traffic condition, the priority indices coming out of the relaxed
problem, the closed-form per-server subproblem value, the mean-field
occupancy dynamics and their equilibrium, and the relaxed-optimum energy
efficiency used as the deviation baseline.

The analytic chain assumes exponentially distributed job sizes; results for
scenarios with other size distributions are approximations and are flagged
as such by the benchmark.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from .model import Scenario, ServerGroup, effective_energy_efficiency

VIRTUAL_GROUP = 0

# available-mass scale below which a group's inflow is parked one level below
# full rather than split across levels (numerical regularization of the
# saturated regime; see _FluidSystem.rhs)
_DEPOSIT_FLOOR = 1e-6


class FluidConvergenceError(RuntimeError):
    """Mean-field integration did not reach a fixed point in time.

    Carries the last iterate and its residual for inspection.
    """

    def __init__(self, message, last, residual):
        super().__init__(message)
        self.last = last
        self.residual = residual


@dataclass(frozen=True)
class StateOrdering:
    """Bijection between vector positions and (group id, occupancy) pairs.

    Controllable states come first, sorted by descending effective energy
    efficiency (ties by group id, then occupancy), followed by the single
    virtual-group state, followed by the full states in the same group order.
    """

    states: tuple
    s0: int

    @property
    def index(self) -> dict:
        return {st: i for i, st in enumerate(self.states)}

    def positions_of_group(self, gid: int) -> list:
        return [i for i, (g, _) in enumerate(self.states) if g == gid]


@dataclass
class OccupancyVector:
    """Proportion of the total server population in each ordered state."""

    values: np.ndarray
    ordering: StateOrdering

    def as_dict(self) -> dict:
        return {st: float(v) for st, v in zip(self.ordering.states, self.values)}

    def group_mass(self, gid: int) -> float:
        return float(sum(self.values[i] for i in self.ordering.positions_of_group(gid)))


@dataclass
class BenchmarkResult:
    """Relaxed-problem baseline for one scenario."""

    ee_opt: float
    z_star: OccupancyVector
    availability: dict
    heavy_traffic: bool
    certified: bool
    exponential_sizes: bool
    indices: dict
    group_loads: dict
    fluid_blocked: dict


def build_ordering(scenario: Scenario) -> StateOrdering:
    groups = sorted(
        scenario.groups,
        key=lambda g: (-effective_energy_efficiency(g), g.id),
    )
    states = []
    for g in groups:
        states.extend((g.id, n) for n in range(g.buffer))
    states.append((VIRTUAL_GROUP, 0))
    states.extend((g.id, g.buffer) for g in groups)
    return StateOrdering(states=tuple(states), s0=scenario.s0)


def birth_death_steady_state(lam: float, mu: float, buffer: int) -> np.ndarray:
    """Stationary law of an M/M/1/B queue: pi(n) proportional to (lam/mu)^n."""
    if mu <= 0:
        raise ValueError("service rate must be positive")
    if lam < 0:
        raise ValueError("arrival rate must be nonnegative")
    if buffer < 1:
        raise ValueError("buffer must be at least 1")
    r = lam / mu
    n = np.arange(buffer + 1, dtype=float)
    w = r**n if r <= 1.0 else r ** (n - buffer)  # shift to dodge overflow
    return w / w.sum()


def availability_load(scenario: Scenario):
    """Per-type availability load under the accept-everywhere relaxation.

    Each server independently sees the full (scaled) arrival stream of every
    type it can serve; A_j sums the resulting non-full probabilities over the
    type's available servers.  Returns ({type id: A_j}, all(A_j <= 1)).
    Exact for exponential job sizes only.
    """
    lam_by_group = {g.id: 0.0 for g in scenario.groups}
    for t in scenario.job_types:
        for gid in t.available_groups:
            lam_by_group[gid] += scenario.scaled_rate(t)
    nonfull = {}
    for g in scenario.groups:
        pi = birth_death_steady_state(lam_by_group[g.id], g.mu, g.buffer)
        nonfull[g.id] = float(1.0 - pi[-1])
    loads = {}
    for t in scenario.job_types:
        loads[t.id] = sum(
            scenario.scaled_count(g) * nonfull[g.id]
            for g in scenario.groups
            if g.id in t.available_groups
        )
    return loads, all(a <= 1.0 for a in loads.values())


def whittle_index(group: ServerGroup, e_star: float) -> float:
    """Priority value of a non-full server: 1 - e* (eps_busy - eps_idle) / mu.

    For any e* > 0 the descending index order coincides with descending
    effective energy efficiency.
    """
    return 1.0 - e_star * (group.eps_busy - group.eps_idle) / group.mu


def relaxed_subproblem_value(
    group: ServerGroup, m: int, nu: float, e_star: float, lam_agg: float
) -> float:
    """Long-run value of accepting up to occupancy m in the per-server problem.

    Closed form: lam * ((mu - e*(eps_busy - eps_idle))/mu - nu)
                 * sum_{n<=m} r^n / sum_{n<=m+1} r^n with r = lam/mu.
    Used to verify the threshold structure of the relaxed optimum.
    """
    if not 0 <= m <= group.buffer - 1:
        raise ValueError("occupancy threshold must lie in the controllable range")
    r = lam_agg / group.mu
    num = sum(r**n for n in range(m + 1))
    den = num + r ** (m + 1)
    prefactor = (group.mu - e_star * (group.eps_busy - group.eps_idle)) / group.mu - nu
    return lam_agg * prefactor * num / den


# -- fluid routing and equilibrium -----------------------------------------


def _priority_groups(scenario: Scenario) -> list:
    return sorted(
        scenario.groups, key=lambda g: (-effective_energy_efficiency(g), g.id)
    )


def _unsat_geometric_ratio(r: float, buffer: int) -> float:
    """Ratio q of the truncated-geometric equilibrium with busy mass exactly r.

    q solves q * (sum_{n<B} q^n) / (sum_{n<=B} q^n) = r, which makes the
    per-server throughput mu * (1 - y_0) equal the absorbed flow.
    """
    if r <= 0.0:
        return 0.0

    def f(q):
        powers = [q**n for n in range(buffer + 1)]
        return q * sum(powers[:-1]) / sum(powers) - r

    hi = 1.0
    while f(hi) < 0.0:
        hi *= 2.0
        if hi > 1e12:
            raise FluidConvergenceError("no geometric ratio for near-critical load", None, r)
    return brentq(f, 0.0, hi, xtol=1e-14, rtol=1e-15)


def _group_distribution(r: float, buffer: int, split: str) -> np.ndarray:
    """Within-group occupancy fractions at per-server load r (1 means saturated)."""
    y = np.zeros(buffer + 1)
    if r >= 1.0 - 1e-12:
        y[buffer] = 1.0
        return y
    if split == "proportional":
        q = _unsat_geometric_ratio(r, buffer)
        w = np.array([q**n for n in range(buffer + 1)])
        return w / w.sum()
    if split == "lowest":
        y[0] = 1.0 - r
        y[1] = r
        return y
    raise ValueError(f"unknown within-group split {split!r}")


def allocate_flows(scenario: Scenario):
    """Greedy fluid flow routing down the shared efficiency ladder.

    Every type offers its remaining flow to its best group; an unsaturated
    group absorbs everything offered, a saturated one hands out its service
    capacity in proportion to the offers.  Rates are base (h = 1) units.
    Returns (per-group per-server load r_k, absorbed[type][group], blocked).
    """
    remaining = {t.id: t.base_rate for t in scenario.job_types}
    absorbed = {t.id: {} for t in scenario.job_types}
    loads = {}
    for g in _priority_groups(scenario):
        offers = {
            t.id: remaining[t.id]
            for t in scenario.job_types
            if g.id in t.available_groups and remaining[t.id] > 0.0
        }
        offered = sum(offers.values())
        cap = g.base_count * g.mu
        if offered <= 0.0:
            loads[g.id] = 0.0
            continue
        if offered < cap:
            for tid, f in offers.items():
                absorbed[tid][g.id] = f
                remaining[tid] = 0.0
            loads[g.id] = offered / cap
        else:
            frac = cap / offered
            for tid, f in offers.items():
                absorbed[tid][g.id] = f * frac
                remaining[tid] = f * (1.0 - frac)
            loads[g.id] = 1.0
    return loads, absorbed, remaining


def equilibrium_balance(scenario: Scenario, split: str = "proportional") -> OccupancyVector:
    """Equilibrium occupancy proportions solved directly from flow balance.

    Independent of the time-stepped dynamics; used to cross-check them and as
    a fast benchmark path.
    """
    ordering = build_ordering(scenario)
    loads, _, _ = allocate_flows(scenario)
    s0 = scenario.s0
    z = np.zeros(len(ordering.states))
    index = ordering.index
    for g in scenario.groups:
        y = _group_distribution(loads[g.id], g.buffer, split)
        for n in range(g.buffer + 1):
            z[index[(g.id, n)]] = y[n] * g.base_count / s0
    z[index[(VIRTUAL_GROUP, 0)]] = 1.0 / s0
    return OccupancyVector(values=z, ordering=ordering)


class _FluidSystem:
    """Precomputed structure for the mean-field right-hand side."""

    def __init__(self, scenario: Scenario, split: str, sat_tol: float):
        self.ordering = build_ordering(scenario)
        index = self.ordering.index
        self.split = split
        self.sat_tol = sat_tol
        self.s0 = scenario.s0
        self.groups = _priority_groups(scenario)
        self.idx = {
            g.id: [index[(g.id, n)] for n in range(g.buffer + 1)] for g in self.groups
        }
        self.flows = [
            (t.id, t.base_rate / self.s0, frozenset(t.available_groups))
            for t in sorted(scenario.job_types, key=lambda t: t.id)
        ]
        self.dim = len(self.ordering.states)

    def initial(self) -> np.ndarray:
        z = np.zeros(self.dim)
        for g in self.groups:
            z[self.idx[g.id][0]] = g.base_count / self.s0
        z[self.ordering.index[(VIRTUAL_GROUP, 0)]] = 1.0 / self.s0
        return z

    def rhs(self, z: np.ndarray) -> np.ndarray:
        dz = np.zeros(self.dim)
        # departures: every non-idle server completes work at total rate mu
        for g in self.groups:
            ids = self.idx[g.id]
            for n in range(1, g.buffer + 1):
                flux = g.mu * z[ids[n]]
                dz[ids[n]] -= flux
                dz[ids[n - 1]] += flux
        # arrivals: strict priority over groups, capacity-capped once saturated
        remaining = {tid: f for tid, f, _ in self.flows}
        avail_groups = {tid: ag for tid, _, ag in self.flows}
        for g in self.groups:
            ids = self.idx[g.id]
            offered = 0.0
            offering = []
            for tid, f, _ in self.flows:
                if g.id in avail_groups[tid] and remaining[tid] > 0.0:
                    offering.append(tid)
                    offered += remaining[tid]
            if offered <= 0.0:
                continue
            avail = sum(z[ids[n]] for n in range(g.buffer))
            if avail > self.sat_tol:
                absorbed = offered
                for tid in offering:
                    remaining[tid] = 0.0
            else:
                drain = g.mu * z[ids[g.buffer]]
                absorbed = min(offered, drain)
                if absorbed > 0.0:
                    frac = absorbed / offered
                    for tid in offering:
                        remaining[tid] *= 1.0 - frac
            if absorbed <= 0.0:
                continue
            # Below _DEPOSIT_FLOOR of available mass the only non-full servers
            # are freshly freed ones sitting one below full; depositing there
            # avoids dividing by a vanishing mass (which makes the explicit
            # integrator grind) and perturbs the composition by at most the
            # floor itself.
            if avail <= _DEPOSIT_FLOOR:
                dz[ids[g.buffer - 1]] -= absorbed
                dz[ids[g.buffer]] += absorbed
            elif self.split == "proportional":
                for n in range(g.buffer):
                    flux = absorbed * z[ids[n]] / avail
                    if flux:
                        dz[ids[n]] -= flux
                        dz[ids[n + 1]] += flux
            else:  # lowest occupied level first
                target = g.buffer - 1
                for n in range(g.buffer):
                    if z[ids[n]] > _DEPOSIT_FLOOR:
                        target = n
                        break
                dz[ids[target]] -= absorbed
                dz[ids[target + 1]] += absorbed
        return dz


def fluid_rhs(scenario: Scenario, z: np.ndarray, split: str = "proportional",
              sat_tol: float = 1e-9) -> np.ndarray:
    """Mean-field drift at occupancy proportions z (ordering per build_ordering)."""
    return _FluidSystem(scenario, split, sat_tol).rhs(np.asarray(z, dtype=float))


def fluid_equilibrium(
    scenario: Scenario,
    tol: float = 1e-9,
    max_time: float | None = None,
    split: str = "proportional",
) -> OccupancyVector:
    """Integrate the mean-field dynamics from the empty state to a fixed point.

    Stops when the drift's max-norm falls below tol; raises
    FluidConvergenceError (carrying the last iterate) if max_time of model
    time is exhausted first.  The saturation threshold on available group
    mass equals tol.
    """
    sys = _FluidSystem(scenario, split, tol)
    mu_min = min(g.mu for g in sys.groups)
    if max_time is None:
        max_time = 1000.0 / mu_min
    chunk = 20.0 / mu_min
    z = sys.initial()
    elapsed = 0.0
    residual = float(np.max(np.abs(sys.rhs(z))))
    while residual >= tol:
        if elapsed >= max_time:
            raise FluidConvergenceError(
                f"no fixed point within {max_time} time units (residual {residual:.3e})",
                OccupancyVector(values=z, ordering=sys.ordering),
                residual,
            )
        span = min(chunk, max_time - elapsed)
        sol = solve_ivp(
            lambda _, y: sys.rhs(y),
            (0.0, span),
            z,
            method="RK45",
            rtol=1e-10,
            atol=1e-13,
        )
        if not sol.success:
            raise FluidConvergenceError(
                f"integrator failure: {sol.message}",
                OccupancyVector(values=z, ordering=sys.ordering),
                residual,
            )
        z = sol.y[:, -1]
        elapsed += span
        residual = float(np.max(np.abs(sys.rhs(z))))
    return OccupancyVector(values=z, ordering=sys.ordering)


# -- benchmark --------------------------------------------------------------


def energy_efficiency_at(scenario: Scenario, occupancy: OccupancyVector) -> float:
    """Throughput over power when the population sits at the given proportions."""
    by_id = {g.id: g for g in scenario.groups}
    num = 0.0
    den = 0.0
    for (gid, n), v in zip(occupancy.ordering.states, occupancy.values):
        if gid == VIRTUAL_GROUP:
            continue
        g = by_id[gid]
        if n > 0:
            num += v * g.mu
            den += v * g.eps_busy
        else:
            den += v * g.eps_idle
    return num / den if den > 0 else 0.0


def opt_energy_efficiency(
    scenario: Scenario,
    split: str = "proportional",
    method: str = "ode",
    tol: float = 1e-9,
    max_time: float | None = None,
) -> BenchmarkResult:
    """Relaxed-optimum energy efficiency evaluated at the fluid equilibrium.

    The result is certified only when the scenario has one job type or meets
    the heavy-traffic condition; otherwise the value is still reported with
    certified=False.  method "ode" integrates the dynamics; "balance" solves
    the flow-balance equations directly (same fixed point, no integration).
    """
    if method == "ode":
        z_star = fluid_equilibrium(scenario, tol=tol, max_time=max_time, split=split)
    elif method == "balance":
        z_star = equilibrium_balance(scenario, split=split)
    else:
        raise ValueError(f"unknown method {method!r}")
    ee = energy_efficiency_at(scenario, z_star)
    loads, absorbed, blocked = allocate_flows(scenario)
    availability, heavy = availability_load(scenario)
    certified = heavy or len(scenario.job_types) == 1
    exponential = all(t.size_dist.kind == "exp" for t in scenario.job_types)
    indices = {g.id: whittle_index(g, ee) for g in scenario.groups}
    return BenchmarkResult(
        ee_opt=ee,
        z_star=z_star,
        availability=availability,
        heavy_traffic=heavy,
        certified=certified,
        exponential_sizes=exponential,
        indices=indices,
        group_loads=loads,
        fluid_blocked=blocked,
    )


def normalized_deviation(ee_opt: float, ee_policy: float) -> float:
    """(EE_opt - EE_policy) / EE_opt; slightly negative values are reported as-is."""
    if ee_opt <= 0:
        raise ValueError("baseline energy efficiency must be positive")
    return (ee_opt - ee_policy) / ee_opt
