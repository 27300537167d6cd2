"""Server-farm scenario description: domain types, validation, scaling and
the random scenario generators used by the deviation studies.

Conventions: job sizes are measured in size-units with mean 1, service rates
mu_k in size-units per unit time, power rates in energy per unit time.  The
time unit is abstract except in trace mode, where it is seconds.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np
import yaml

DISCIPLINES = ("ps", "srpt")
TIE_BREAKS = ("lltb", "sqtb")
SIZE_KINDS = ("exp", "pareto-f", "pareto-inf", "det")

PARETO_FINITE_SHAPE = 2.001
PARETO_INFINITE_SHAPE = 1.98


class ScenarioError(ValueError):
    """A scenario description violates a model constraint."""


@dataclass(frozen=True)
class SizeDistribution:
    """Unit-mean job-size distribution.

    kind is one of "exp", "pareto-f", "pareto-inf", "det".  Pareto kinds carry
    a shape parameter a > 1; the scale is fixed to (a-1)/a so the mean is 1.
    """

    kind: str = "exp"
    shape: float | None = None

    def __post_init__(self):
        if self.kind not in SIZE_KINDS:
            raise ScenarioError(f"unknown size distribution kind {self.kind!r}")
        if self.kind == "pareto-f" and self.shape is None:
            object.__setattr__(self, "shape", PARETO_FINITE_SHAPE)
        if self.kind == "pareto-inf" and self.shape is None:
            object.__setattr__(self, "shape", PARETO_INFINITE_SHAPE)
        if self.kind.startswith("pareto"):
            if self.shape is None or self.shape <= 1.0:
                raise ScenarioError(
                    f"Pareto shape must exceed 1 for a finite mean, got {self.shape}"
                )
        elif self.shape is not None:
            raise ScenarioError(f"shape parameter is only valid for Pareto kinds")

    @property
    def pareto_scale(self) -> float:
        """x_m = (a-1)/a, making the Pareto mean a*x_m/(a-1) equal 1."""
        if not self.kind.startswith("pareto"):
            raise ScenarioError("pareto_scale is undefined for non-Pareto kinds")
        return (self.shape - 1.0) / self.shape


@dataclass(frozen=True)
class ServerGroup:
    """One homogeneous group of servers.

    mu is the total (and peak) service rate of one server, eps_busy/eps_idle
    its power draw in the two operating modes, buffer the per-server cap on
    resident jobs and base_count the number of servers at scaling h = 1.
    """

    id: int
    mu: float
    eps_busy: float
    eps_idle: float
    buffer: int
    base_count: int = 1

    def __post_init__(self):
        if self.id < 1:
            raise ScenarioError(f"group id must be >= 1, got {self.id}")
        if not self.mu > 0:
            raise ScenarioError(f"group {self.id}: service rate must be positive")
        if not (self.eps_busy > self.eps_idle >= 0):
            raise ScenarioError(
                f"group {self.id}: need eps_busy > eps_idle >= 0, "
                f"got {self.eps_busy} / {self.eps_idle}"
            )
        if not (isinstance(self.buffer, int) and self.buffer >= 1):
            raise ScenarioError(f"group {self.id}: buffer must be an integer >= 1")
        if not (isinstance(self.base_count, int) and self.base_count >= 1):
            raise ScenarioError(f"group {self.id}: base_count must be an integer >= 1")


@dataclass(frozen=True)
class JobType:
    """A class of jobs: base arrival rate plus the set of usable groups."""

    id: int
    base_rate: float
    available_groups: frozenset
    size_dist: SizeDistribution = SizeDistribution("exp")

    def __post_init__(self):
        object.__setattr__(self, "available_groups", frozenset(self.available_groups))
        if self.id < 1:
            raise ScenarioError(f"job type id must be >= 1, got {self.id}")
        if not self.base_rate > 0:
            raise ScenarioError(f"type {self.id}: arrival rate must be positive")
        if not self.available_groups:
            raise ScenarioError(f"type {self.id}: available group set is empty")


@dataclass(frozen=True)
class Scenario:
    """A full system description.

    Base quantities (counts, rates) describe the system at h = 1; the engine
    and benchmark consume the scaled quantities base * h.  A virtual blocking
    group (one base server) absorbs rejected jobs and draws no power.
    """

    groups: tuple
    job_types: tuple
    h: int = 1
    discipline: str = "ps"
    tie_break: str = "lltb"
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        object.__setattr__(self, "job_types", tuple(self.job_types))
        if not self.groups:
            raise ScenarioError("scenario has no server groups")
        if not self.job_types:
            raise ScenarioError("scenario has no job types")
        if not (isinstance(self.h, int) and self.h >= 1):
            raise ScenarioError(f"scaling parameter must be an integer >= 1, got {self.h}")
        if self.discipline not in DISCIPLINES:
            raise ScenarioError(f"unknown discipline {self.discipline!r}")
        if self.tie_break not in TIE_BREAKS:
            raise ScenarioError(f"unknown tie-break rule {self.tie_break!r}")
        gids = [g.id for g in self.groups]
        if len(set(gids)) != len(gids):
            raise ScenarioError("duplicate group ids")
        tids = [t.id for t in self.job_types]
        if len(set(tids)) != len(tids):
            raise ScenarioError("duplicate job type ids")
        known = set(gids)
        for t in self.job_types:
            missing = t.available_groups - known
            if missing:
                raise ScenarioError(
                    f"type {t.id}: available groups {sorted(missing)} not in scenario"
                )

    # -- derived quantities ------------------------------------------------

    def group(self, gid: int) -> ServerGroup:
        for g in self.groups:
            if g.id == gid:
                return g
        raise ScenarioError(f"no group with id {gid}")

    def scaled_count(self, g: ServerGroup) -> int:
        return g.base_count * self.h

    def scaled_rate(self, t: JobType) -> float:
        return t.base_rate * self.h

    @property
    def s0(self) -> int:
        """Server pools per unit of scale: sum of base counts plus the virtual group."""
        return sum(g.base_count for g in self.groups) + 1

    @property
    def total_servers(self) -> int:
        return sum(self.scaled_count(g) for g in self.groups)

    def rebased(self) -> "Scenario":
        """Fold the current scale into the base quantities and reset h to 1."""
        groups = tuple(replace(g, base_count=g.base_count * self.h) for g in self.groups)
        types = tuple(replace(t, base_rate=t.base_rate * self.h) for t in self.job_types)
        return replace(self, groups=groups, job_types=types, h=1)


def effective_energy_efficiency(group: ServerGroup) -> float:
    """Service rate per unit of controllable power, mu / (eps_busy - eps_idle)."""
    return group.mu / (group.eps_busy - group.eps_idle)


def normalized_offered_traffic(scenario: Scenario) -> float:
    """Total arrival rate over total service rate, both at the current scale."""
    total_mu = sum(scenario.scaled_count(g) * g.mu for g in scenario.groups)
    if total_mu <= 0:
        raise ScenarioError("total service rate is zero")
    return sum(scenario.scaled_rate(t) for t in scenario.job_types) / total_mu


def per_type_traffic(scenario: Scenario, type_id: int) -> float:
    """Arrival rate of one type over the service rate of its available servers."""
    for t in scenario.job_types:
        if t.id == type_id:
            denom = sum(
                scenario.scaled_count(g) * g.mu
                for g in scenario.groups
                if g.id in t.available_groups
            )
            return scenario.scaled_rate(t) / denom
    raise ScenarioError(f"no job type with id {type_id}")


def scale(scenario: Scenario, h: int) -> Scenario:
    """Multiply server counts and arrival rates by h (composes with prior scaling)."""
    if not (isinstance(h, int) and h >= 1):
        raise ScenarioError(f"scaling parameter must be an integer >= 1, got {h}")
    return replace(scenario, h=scenario.h * h)


# -- random generation ---------------------------------------------------


def generate_scenario(
    seed: int,
    K: int,
    J: int,
    rho: float,
    mode: str = "single_type",
    buffer: int | None = None,
    discipline: str = "ps",
    tie_break: str = "lltb",
) -> Scenario:
    """Draw a random K-group scenario for the deviation studies.

    Service rates are uniform on [1, 10].  The plain efficiency mu/eps of
    group 1 is normalized to 1 and successive groups multiply it by a ratio
    drawn uniformly from [0.5, 1], so mu_k/eps_k is non-increasing in k.
    Idle power is eps_k * (0.1 + 0.1 k), with the fraction clamped at 0.9 so
    eps_idle < eps_busy holds for any K.

    single_type mode produces one type that may use every group, with rate
    rho times the total base service rate; multi_type produces J types, each
    using a uniformly sized random subset of groups, with rate rho times the
    base service rate of its available servers.
    """
    if K < 2:
        raise ScenarioError("need at least two server groups")
    if J < 1:
        raise ScenarioError("need at least one job type")
    if not rho > 0:
        raise ScenarioError("offered traffic must be positive")
    if mode not in ("single_type", "multi_type"):
        raise ScenarioError(f"unknown generator mode {mode!r}")

    rng = np.random.default_rng(seed)
    if buffer is None:
        buffer = 2 if mode == "single_type" else 1

    mu = rng.uniform(1.0, 10.0, size=K)
    efficiency = np.empty(K)
    efficiency[0] = 1.0
    for k in range(1, K):
        efficiency[k] = efficiency[k - 1] * rng.uniform(0.5, 1.0)
    eps_busy = mu / efficiency
    idle_frac = np.minimum(0.1 + 0.1 * np.arange(1, K + 1), 0.9)
    eps_idle = eps_busy * idle_frac

    groups = tuple(
        ServerGroup(
            id=k + 1,
            mu=float(mu[k]),
            eps_busy=float(eps_busy[k]),
            eps_idle=float(eps_idle[k]),
            buffer=buffer,
            base_count=1,
        )
        for k in range(K)
    )

    types = []
    if mode == "single_type":
        avail = frozenset(g.id for g in groups)
        rate = rho * float(np.sum(mu))
        types.append(JobType(id=1, base_rate=rate, available_groups=avail))
    else:
        for j in range(J):
            m = int(rng.integers(1, K + 1))
            chosen = rng.choice(K, size=m, replace=False)
            avail = frozenset(int(k) + 1 for k in chosen)
            rate = rho * float(sum(mu[k - 1] for k in avail))
            types.append(JobType(id=j + 1, base_rate=rate, available_groups=avail))

    return Scenario(
        groups=groups,
        job_types=tuple(types),
        h=1,
        discipline=discipline,
        tie_break=tie_break,
        name=f"generated-{mode}-seed{seed}",
    )


def with_size_dists(scenario: Scenario, dist: str) -> Scenario:
    """Return a copy with every type's size distribution replaced.

    dist is one of the distribution kinds, or "mixed", which cycles
    exp / pareto-f / pareto-inf across the job types.
    """
    if dist == "mixed":
        cycle = ("exp", "pareto-f", "pareto-inf")
        types = tuple(
            replace(t, size_dist=SizeDistribution(cycle[i % len(cycle)]))
            for i, t in enumerate(scenario.job_types)
        )
    else:
        types = tuple(
            replace(t, size_dist=SizeDistribution(dist)) for t in scenario.job_types
        )
    return replace(scenario, job_types=types)


# -- config file round trip ----------------------------------------------


def scenario_to_dict(scenario: Scenario) -> dict:
    out = {
        "name": scenario.name,
        "discipline": scenario.discipline,
        "tie_break": scenario.tie_break,
        "groups": [
            {
                "id": g.id,
                "mu": g.mu,
                "eps_busy": g.eps_busy,
                "eps_idle": g.eps_idle,
                "buffer": g.buffer,
                "base_count": g.base_count,
            }
            for g in scenario.groups
        ],
        "job_types": [
            {
                "id": t.id,
                "base_rate": t.base_rate,
                "available_groups": sorted(t.available_groups),
                "size_dist": (
                    {"kind": t.size_dist.kind}
                    if not t.size_dist.kind.startswith("pareto")
                    else {"kind": t.size_dist.kind, "shape": t.size_dist.shape}
                ),
            }
            for t in scenario.job_types
        ],
    }
    return out


def scenario_from_dict(data: dict) -> Scenario:
    try:
        groups = tuple(
            ServerGroup(
                id=int(g["id"]),
                mu=float(g["mu"]),
                eps_busy=float(g["eps_busy"]),
                eps_idle=float(g["eps_idle"]),
                buffer=int(g["buffer"]),
                base_count=int(g.get("base_count", 1)),
            )
            for g in data["groups"]
        )
        types = tuple(
            JobType(
                id=int(t["id"]),
                base_rate=float(t["base_rate"]),
                available_groups=frozenset(int(k) for k in t["available_groups"]),
                size_dist=SizeDistribution(
                    kind=t.get("size_dist", {}).get("kind", "exp"),
                    shape=t.get("size_dist", {}).get("shape"),
                ),
            )
            for t in data["job_types"]
        )
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"malformed scenario config: {exc}") from exc
    return Scenario(
        groups=groups,
        job_types=types,
        discipline=data.get("discipline", "ps"),
        tie_break=data.get("tie_break", "lltb"),
        name=data.get("name", ""),
    )


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ScenarioError(f"{path}: config root must be a mapping")
    return scenario_from_dict(data)


def save_scenario(scenario: Scenario, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(scenario_to_dict(scenario), fh, sort_keys=False)


def config_hash(scenario: Scenario) -> str:
    """Stable short hash of the base configuration, used for provenance columns."""
    blob = yaml.safe_dump(scenario_to_dict(scenario.rebased()), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]
