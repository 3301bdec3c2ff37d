"""Post-run aggregation of raw samples into per-phase statistics.

All intervals are half-open ``[start, end)`` in µs since run start. Nothing
here runs while a measurement is in progress.
"""
from __future__ import annotations

import bisect
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .reporters import U64_MAX, MetricDescriptor, Sample

PHASES = ("baseline", "installation", "boot", "idle", "runtime", "removal")
UNASSIGNED = "unassigned"
ENERGY_METRIC = "energy"


class MetricsError(Exception):
    pass


class EmptySeries(MetricsError):
    pass


class InsufficientSamples(MetricsError):
    pass


class UnknownMetric(MetricsError):
    pass


class InvalidMarkers(MetricsError, ValueError):
    pass


@dataclass(frozen=True)
class PhaseMarker:
    phase: str
    start: int
    end: int
    sub: str | None = None

    @property
    def label(self) -> str:
        return self.phase if self.sub is None else f"{self.phase}:{self.sub}"


def validate_markers(markers: Sequence[PhaseMarker]) -> None:
    """Top-level markers must be known phases, non-empty, ordered and disjoint.

    A prefix of the six phases is accepted (aborted runs stop early). Step
    markers must lie inside the runtime marker and not overlap each other.
    """
    top = [m for m in markers if m.sub is None]
    for m in markers:
        if m.phase not in PHASES:
            raise InvalidMarkers(f"unknown phase {m.phase!r}")
        if not m.start < m.end:
            raise InvalidMarkers(f"{m.label}: start {m.start} not before end {m.end}")
    order = [PHASES.index(m.phase) for m in top]
    if order != sorted(order) or len(set(order)) != len(order):
        raise InvalidMarkers(f"phases out of order: {[m.phase for m in top]}")
    for a, b in zip(top, top[1:]):
        if a.end > b.start:
            raise InvalidMarkers(f"{a.phase} overlaps {b.phase}")
    subs = sorted((m for m in markers if m.sub is not None), key=lambda m: m.start)
    runtime = next((m for m in top if m.phase == "runtime"), None)
    for m in subs:
        if m.phase != "runtime" or runtime is None:
            raise InvalidMarkers(f"step marker {m.label} outside a runtime phase")
        if m.start < runtime.start or m.end > runtime.end:
            raise InvalidMarkers(f"step marker {m.label} exceeds the runtime phase")
    for a, b in zip(subs, subs[1:]):
        if a.end > b.start:
            raise InvalidMarkers(f"{a.label} overlaps {b.label}")


def _values(series: Iterable[Sample] | Iterable[int]) -> list[int]:
    return [s.value if isinstance(s, Sample) else int(s) for s in series]


def wrap_corrected_delta(series: Iterable[Sample] | Iterable[int], wrap_max: int | None = None) -> int:
    """Total increase of a counter that wraps from wrap_max back to 0.

    Assumes at most one wrap between consecutive samples.
    """
    values = _values(series)
    if not values:
        raise EmptySeries("counter series is empty")
    modulus = (U64_MAX if wrap_max is None else wrap_max) + 1
    total = 0
    prev = values[0]
    for v in values[1:]:
        total += v - prev if v >= prev else v - prev + modulus
        prev = v
    return total


def suspicious_wraps(series: Iterable[Sample] | Iterable[int], wrap_max: int | None = None) -> int:
    """Count steps whose corrected increase exceeds half the counter range.

    Such a step means the counter moves fast enough that a second wrap inside
    one interval would go unnoticed.
    """
    values = _values(series)
    modulus = (U64_MAX if wrap_max is None else wrap_max) + 1
    n = 0
    for a, b in zip(values, values[1:]):
        step = b - a if b >= a else b - a + modulus
        if step > modulus // 2:
            n += 1
    return n


def unwrap(values: Sequence[int], wrap_max: int | None = None) -> list[int]:
    modulus = (U64_MAX if wrap_max is None else wrap_max) + 1
    if not values:
        return []
    out = [values[0]]
    offset = 0
    for a, b in zip(values, values[1:]):
        if b < a:
            offset += modulus
        out.append(b + offset)
    return out


def integrate_power(series: Sequence[Sample], window: tuple[int, int]) -> float:
    """Energy in µJ of a mW gauge over the half-open window ``[start, end)``.

    Samples are joined linearly (trapezoid rule); before the first and after
    the last sample the nearest value is held. mW·µs / 1000 = µJ.
    """
    start, end = window
    if end <= start:
        return 0.0
    pts = sorted(series, key=lambda s: s.t)
    if len(pts) < 2:
        raise InsufficientSamples(f"need at least 2 power samples, got {len(pts)}")
    if pts[-1].t < start or pts[0].t > end:
        raise InsufficientSamples(f"no power samples overlap [{start}, {end})")
    t = np.fromiter((s.t for s in pts), dtype=np.float64, count=len(pts))
    v = np.fromiter((s.value for s in pts), dtype=np.float64, count=len(pts))
    lo = np.searchsorted(t, start, side="right")
    hi = np.searchsorted(t, end, side="left")
    tt = np.concatenate(([start], t[lo:hi], [end]))
    vv = np.concatenate(([np.interp(start, t, v)], v[lo:hi], [np.interp(end, t, v)]))
    return float(np.sum((vv[1:] + vv[:-1]) * np.diff(tt)) / 2.0 / 1000.0)


def counter_energy(series: Sequence[Sample], window: tuple[int, int], wrap_max: int | None) -> float:
    """Energy in µJ from a cumulative µJ counter, interpolated at the window edges."""
    pts = sorted(series, key=lambda s: s.t)
    if len(pts) < 2:
        raise InsufficientSamples(f"need at least 2 counter samples, got {len(pts)}")
    t = np.array([s.t for s in pts], dtype=np.float64)
    # unwrapped values can exceed 2**53 only after absurdly long runs; relative offsets stay exact
    raw = unwrap([s.value for s in pts], wrap_max)
    base = raw[0]
    c = np.array([x - base for x in raw], dtype=np.float64)
    start, end = window
    return float(np.interp(end, t, c) - np.interp(start, t, c))


def assign_phases(samples: Iterable[Sample], markers: Sequence[PhaseMarker]) -> dict[str, list[Sample]]:
    """Bucket samples by the marker whose ``[start, end)`` holds them.

    Markers must not overlap; pass either the top-level markers or the step
    markers, not both. Samples outside every marker go to ``"unassigned"``.
    """
    ordered = sorted(markers, key=lambda m: m.start)
    for a, b in zip(ordered, ordered[1:]):
        if a.end > b.start:
            raise InvalidMarkers(f"{a.label} overlaps {b.label}")
    starts = [m.start for m in ordered]
    buckets: dict[str, list[Sample]] = {m.label: [] for m in ordered}
    buckets[UNASSIGNED] = []
    for s in samples:
        i = bisect.bisect_right(starts, s.t) - 1
        if i >= 0 and s.t < ordered[i].end:
            buckets[ordered[i].label].append(s)
        else:
            buckets[UNASSIGNED].append(s)
    return buckets


@dataclass
class PhaseStats:
    phase: str
    metric_id: str
    kind: str
    unit: str
    duration: int
    scope: str = "machine"
    detail: str | None = None
    sub: str | None = None
    n_samples: int = 0
    mean: float | None = None
    min: int | None = None
    max: int | None = None
    stddev: float | None = None
    total: int | None = None
    energy_total: int | None = None
    energy_source: str | None = None

    @property
    def key(self) -> tuple:
        return (self.phase, self.sub, self.metric_id, self.scope, self.detail)

    @property
    def value(self) -> float | None:
        """The headline number: mean for gauges, total for counters."""
        if self.metric_id == ENERGY_METRIC:
            return self.energy_total
        return self.total if self.kind == "counter" else self.mean

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "PhaseStats":
        return cls(**d)


def _gauge_stats(row: PhaseStats, values: list[int]) -> None:
    arr = np.asarray(values, dtype=np.float64)
    row.mean = float(arr.mean())
    row.min = int(min(values))
    row.max = int(max(values))
    row.stddev = float(arr.std())
    # float rounding can nudge the mean just outside [min, max] for constant series
    row.mean = min(max(row.mean, row.min), row.max)


@dataclass
class StatsResult:
    stats: list[PhaseStats]
    unassigned: dict[str, int] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)


SeriesKey = tuple  # (metric_id, scope)


def phase_stats(series: Mapping[SeriesKey, Sequence[Sample]], markers: Sequence[PhaseMarker],
                descriptors: Mapping[str, MetricDescriptor]) -> StatsResult:
    """Per-phase (and per-step) statistics for every series.

    ``series`` maps ``(metric_id, scope)`` to the samples read from one
    reporter file. Gauges get mean/min/max/population stddev; counters get the
    wrap-corrected delta. A synthetic ``energy`` row per phase carries the
    energy total from the package energy counter, or else from integrating
    machine power; ``energy_source`` records which.
    """
    validate_markers(markers)
    for metric_id, _scope in series:
        if metric_id not in descriptors:
            raise UnknownMetric(metric_id)
    top = [m for m in markers if m.sub is None]
    steps = [m for m in markers if m.sub is not None]
    result = StatsResult([])

    for key in sorted(series, key=lambda k: (k[0], k[1])):
        metric_id, scope = key
        desc = descriptors[metric_id]
        samples = sorted(series[key], key=lambda s: (s.t, s.detail or ""))
        details = sorted({s.detail for s in samples}, key=lambda d: (d is not None, d or ""))
        by_detail = {d: [s for s in samples if s.detail == d] for d in details}
        for detail in details:
            own = by_detail[detail]
            if desc.kind == "counter":
                n = suspicious_wraps(own, desc.wrap_max)
                if n:
                    result.warnings.append(
                        f"{metric_id}[{detail or scope}]: {n} step(s) exceed half the counter range; "
                        "multiple wraps per interval cannot be ruled out")
            for group in (top, steps):
                if not group:
                    continue
                buckets = assign_phases(own, group)
                if group is top and buckets[UNASSIGNED]:
                    label = f"{metric_id}.{scope}" + (f"[{detail}]" if detail else "")
                    result.unassigned[label] = len(buckets[UNASSIGNED])
                for m in group:
                    vals = [s.value for s in buckets[m.label]]
                    row = PhaseStats(m.phase, metric_id, desc.kind, desc.unit, m.end - m.start,
                                     scope, detail, m.sub, len(vals))
                    if vals:
                        if desc.kind == "gauge":
                            _gauge_stats(row, vals)
                        else:
                            row.total = wrap_corrected_delta(vals, desc.wrap_max)
                    result.stats.append(row)

    for m in top + steps:
        row = _energy_row(series, descriptors, m)
        if row is not None:
            result.stats.append(row)
    return result


def _energy_row(series, descriptors, m: PhaseMarker) -> PhaseStats | None:
    window = (m.start, m.end)
    energy = None
    source = None
    pkg = series.get(("energy_pkg", "machine"))
    if pkg:
        desc = descriptors["energy_pkg"]
        total = 0.0
        ok = False
        for detail in sorted({s.detail or "" for s in pkg}):
            own = [s for s in pkg if (s.detail or "") == detail]
            try:
                total += counter_energy(own, window, desc.wrap_max)
                ok = True
            except InsufficientSamples:
                continue
        if ok:
            energy, source = total, "energy_pkg"
    if energy is None:
        power = series.get(("machine_power", "machine"))
        if power:
            try:
                energy, source = integrate_power(power, window), "machine_power"
            except InsufficientSamples:
                pass
    if energy is None:
        return None
    e = int(round(energy))
    return PhaseStats(m.phase, ENERGY_METRIC, "counter", "µJ", m.end - m.start, "machine", None, m.sub,
                      0, total=e, energy_total=e, energy_source=source)


def find_stats(stats: Iterable[PhaseStats], phase: str, metric_id: str, scope: str | None = None,
               detail: str | None = None, sub: str | None = None, any_detail: bool = False) -> list[PhaseStats]:
    out = []
    for s in stats:
        if s.phase != phase or s.metric_id != metric_id or s.sub != sub:
            continue
        if scope is not None and s.scope != scope:
            continue
        if not any_detail and s.detail != detail:
            continue
        out.append(s)
    return out


def avg_power_mw(stats: Iterable[PhaseStats], phase: str) -> float | None:
    """Average power of a phase: machine_power mean if measured, else energy / duration."""
    stats = list(stats)
    power = find_stats(stats, phase, "machine_power", "machine")
    if power and power[0].mean is not None:
        return power[0].mean
    energy = find_stats(stats, phase, ENERGY_METRIC, "machine")
    if energy and energy[0].energy_total is not None and energy[0].duration > 0:
        # µJ / µs = W; x1000 for mW
        return energy[0].energy_total / energy[0].duration * 1000.0
    return None
