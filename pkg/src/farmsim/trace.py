"""Arrival-trace ingestion and replay.

Traces are CSV files with header ``timestamp_s,type_id``; timestamps are
seconds since trace start.  A parsed trace can be replayed verbatim as an
engine arrival stream, summarized into piecewise-constant hourly rates, or
regenerated as a nonhomogeneous Poisson stream matching those rates.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

HOUR = 3600.0


class TraceFormatError(ValueError):
    """Unreadable trace file or a row referencing an unknown job type."""


@dataclass(frozen=True, order=True)
class TraceArrival:
    timestamp: float
    type_id: int


@dataclass
class RateProfile:
    """Per-type piecewise-constant arrival rates (jobs per second) on
    fixed-width buckets starting at t = 0."""

    rates: dict = field(default_factory=dict)  # type id -> list of rates
    bucket: float = HOUR

    @property
    def n_buckets(self) -> int:
        return max((len(r) for r in self.rates.values()), default=0)

    def rate(self, type_id: int, t: float) -> float:
        series = self.rates.get(type_id, ())
        i = int(t / self.bucket)
        return series[i] if 0 <= i < len(series) else 0.0


def parse_trace(path, valid_type_ids=None) -> list:
    """Read and sort a trace CSV.

    Malformed rows (wrong field count, non-numeric values, negative
    timestamps) are skipped; their count and first few line numbers are
    reported through the module logger.  A row referencing a type id outside
    valid_type_ids raises TraceFormatError with its line number.
    """
    arrivals = []
    bad_lines = []
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise TraceFormatError(f"cannot read trace {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if lineno == 1 and row and row[0].strip().lower() == "timestamp_s":
                continue
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            try:
                ts = float(row[0])
                tid = int(row[1])
                if len(row) != 2 or ts < 0 or math.isnan(ts):
                    raise ValueError
            except (ValueError, IndexError):
                bad_lines.append(lineno)
                continue
            if valid_type_ids is not None and tid not in valid_type_ids:
                raise TraceFormatError(f"{path}, line {lineno}: unknown type id {tid}")
            arrivals.append(TraceArrival(ts, tid))
    if bad_lines:
        shown = ", ".join(str(n) for n in bad_lines[:5])
        log.warning(
            "%s: skipped %d malformed row(s) (lines %s%s)",
            path, len(bad_lines), shown, ", ..." if len(bad_lines) > 5 else "",
        )
    arrivals.sort()
    return arrivals


def hourly_rates(arrivals, horizon: float | None = None, bucket: float = HOUR) -> RateProfile:
    """Count arrivals per (type, bucket) and divide by the bucket width."""
    if horizon is None:
        horizon = arrivals[-1].timestamp if arrivals else 0.0
    n = max(1, int(math.ceil(horizon / bucket))) if horizon > 0 else 1
    rates = {}
    for a in arrivals:
        series = rates.setdefault(a.type_id, [0.0] * n)
        i = min(int(a.timestamp / bucket), n - 1)
        series[i] += 1.0
    for series in rates.values():
        for i in range(n):
            series[i] /= bucket
    return RateProfile(rates=rates, bucket=bucket)


def replay(arrivals) -> list:
    """Arrival stream for the engine: time-sorted (timestamp, type id) pairs."""
    return [(a.timestamp, a.type_id) for a in sorted(arrivals)]


def nhpp(profile: RateProfile, rng: np.random.Generator) -> list:
    """Sample a piecewise-homogeneous Poisson stream matching the profile.

    Within each bucket the rate is constant, so plain exponential gaps
    restarted at bucket boundaries are exact (no thinning required).
    Returns a merged, time-sorted (timestamp, type id) list.
    """
    events = []
    w = profile.bucket
    for tid, series in sorted(profile.rates.items()):
        for i, rate in enumerate(series):
            if rate <= 0.0:
                continue
            t = i * w
            end = (i + 1) * w
            while True:
                t += rng.exponential(1.0 / rate)
                if t >= end:
                    break
                events.append((t, tid))
    events.sort()
    return events


def save_profile(profile: RateProfile, path) -> None:
    """Write the profile as CSV rows (type_id, hour_index, rate_per_s)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["type_id", "hour_index", "rate_per_s"])
        for tid, series in sorted(profile.rates.items()):
            for i, rate in enumerate(series):
                writer.writerow([tid, i, repr(rate)])


def save_trace(arrivals, path) -> None:
    """Write arrivals back out in the trace CSV format."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp_s", "type_id"])
        for a in sorted(arrivals):
            writer.writerow([repr(float(a.timestamp)), a.type_id])


def diurnal_profile(base: dict, peak: dict, peak_hours, hours: int = 24,
                    ramp: int = 2) -> RateProfile:
    """Synthetic day-shaped profile: a flat base rate per type with a plateau
    at the peak rate over peak_hours and linear ramps of `ramp` hours on each
    side.  base and peak map type id -> jobs per second."""
    lo, hi = min(peak_hours), max(peak_hours)
    rates = {}
    for tid in base:
        series = []
        for hr in range(hours):
            if lo <= hr <= hi:
                f = 1.0
            elif lo - ramp <= hr < lo:
                f = 1.0 - (lo - hr) / (ramp + 1)
            elif hi < hr <= hi + ramp:
                f = 1.0 - (hr - hi) / (ramp + 1)
            else:
                f = 0.0
            series.append(base[tid] + f * (peak[tid] - base[tid]))
        rates[tid] = series
    return RateProfile(rates=rates, bucket=HOUR)
