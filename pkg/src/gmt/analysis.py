"""Rule engine and run-to-run comparison over per-phase statistics."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Iterable, Mapping, Sequence

from .metrics import ENERGY_METRIC, PhaseMarker, PhaseStats, avg_power_mw, find_stats

SEVERITIES = ("info", "warn", "critical")


class AnalysisError(Exception):
    pass


class MissingMetric(AnalysisError):
    pass


class NothingComparable(AnalysisError):
    pass


@dataclass(frozen=True)
class Finding:
    rule_id: str
    severity: str
    phase: str
    metric_id: str
    observed: float | None
    threshold: float | None
    unit: str
    message: str
    instance: str | None = None
    evidence: tuple[tuple, ...] = ()  # PhaseStats keys

    def to_dict(self) -> dict:
        d = asdict(self)
        d["evidence"] = [list(k) for k in self.evidence]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "Finding":
        d = dict(d)
        d["evidence"] = tuple(tuple(k) for k in d.get("evidence", ()))
        return cls(**d)

    @property
    def sort_key(self) -> tuple:
        return (self.rule_id, self.phase, self.instance or "")


@dataclass(frozen=True)
class Rule:
    """One catalog entry. ``statistic`` names how ``observed`` is derived.

    ``comparator`` is ``<`` or ``>``: the rule fires when ``observed <comparator>
    effective threshold``. For ``peak_vs_limit`` and ``vs_baseline`` the
    configured threshold is a factor applied to the service's mem_limit or the
    calibrated power, so observed and threshold share a unit.
    """

    rule_id: str
    title: str
    metric_id: str
    phase: str
    scope: str
    statistic: str
    comparator: str
    threshold: float
    severity: str = "warn"
    unit: str = ""
    enabled: bool = True


DEFAULT_RULES: tuple[Rule, ...] = (
    Rule("R1", "memory over-provisioning", "mem_used", "runtime", "instance", "peak_vs_limit", "<", 0.30,
         "warn", "bytes"),
    Rule("R2", "long boot", "duration", "boot", "machine", "duration", ">", 10_000_000, "warn", "µs"),
    Rule("R3", "low IPC", "ipc_proxy", "runtime", "machine", "mean", "<", 50, "warn", "centi-percent"),
    Rule("R4", "high major page faults", "page_faults_major", "runtime", "machine", "rate_per_s", ">", 100,
         "warn", "count/s"),
    Rule("R5", "idle cost", "power", "idle", "machine", "vs_baseline", ">", 1.5, "warn", "mW"),
)


def rules_with_overrides(overrides: Mapping[str, Mapping[str, Any]] | None = None,
                         base: Sequence[Rule] = DEFAULT_RULES) -> list[Rule]:
    """Apply ``{rule_id: {threshold|severity|enabled|phase|scope: value}}`` overrides."""
    allowed = {"threshold", "severity", "enabled", "phase", "scope", "comparator"}
    out = []
    known = {r.rule_id for r in base}
    for rid in overrides or {}:
        if rid not in known:
            raise ValueError(f"unknown rule {rid!r}")
    for r in base:
        o = dict((overrides or {}).get(r.rule_id, {}))
        bad = set(o) - allowed
        if bad:
            raise ValueError(f"{r.rule_id}: unknown override key(s) {sorted(bad)}")
        if "severity" in o and o["severity"] not in SEVERITIES:
            raise ValueError(f"{r.rule_id}: bad severity {o['severity']!r}")
        out.append(replace(r, **o))
    return out


def load_rule_config(path: str) -> list[Rule]:
    """Rule override file: YAML or JSON mapping ``rules: {R1: {threshold: 0.2}, ...}``."""
    import yaml

    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: expected a mapping")
    return rules_with_overrides(doc.get("rules", {}))


def _skipped(rule: Rule, why: str) -> Finding:
    return Finding(rule.rule_id, "info", rule.phase, rule.metric_id, None, None, rule.unit,
                   f"{rule.rule_id} skipped: {why}")


def _fires(rule: Rule, observed: float, threshold: float) -> bool:
    return observed < threshold if rule.comparator == "<" else observed > threshold


def _phase_duration(rule: Rule, stats: Sequence[PhaseStats], markers: Sequence[PhaseMarker] | None) -> int | None:
    for m in markers or ():
        if m.phase == rule.phase and m.sub is None:
            return m.end - m.start
    for s in stats:
        if s.phase == rule.phase and s.sub is None:
            return s.duration
    return None


def _fmt(x: float) -> str:
    return f"{x:.0f}" if float(x).is_integer() else f"{x:.2f}"


def _evaluate(rule: Rule, stats: Sequence[PhaseStats], scenario, baseline, markers) -> list[Finding]:
    def finding(observed, threshold, instance=None, evidence=()):
        if not _fires(rule, observed, threshold):
            return []
        where = f" in {instance}" if instance else ""
        msg = (f"{rule.title}{where}: {rule.phase} {rule.metric_id} {_fmt(observed)} {rule.unit} "
               f"{rule.comparator} {_fmt(threshold)} {rule.unit}")
        return [Finding(rule.rule_id, rule.severity, rule.phase, rule.metric_id, float(observed),
                        float(threshold), rule.unit, msg, instance, tuple(evidence))]

    if rule.statistic == "duration":
        d = _phase_duration(rule, stats, markers)
        if d is None:
            return [_skipped(rule, f"{rule.phase} phase not measured")]
        return finding(d, rule.threshold)

    if rule.statistic == "vs_baseline":
        if baseline is None or getattr(baseline, "avg_power", None) is None:
            return [_skipped(rule, "no calibration baseline power")]
        p = avg_power_mw(stats, rule.phase)
        if p is None:
            return [_skipped(rule, "metric unavailable")]
        ev = [s.key for s in stats if s.phase == rule.phase and s.sub is None
              and s.metric_id in ("machine_power", ENERGY_METRIC)]
        return finding(p, rule.threshold * baseline.avg_power, evidence=ev)

    rows = [s for s in stats if s.phase == rule.phase and s.sub is None and s.metric_id == rule.metric_id
            and s.scope == rule.scope and s.n_samples > 0]
    if not rows:
        return [_skipped(rule, "metric unavailable")]
    out = []
    if rule.statistic == "peak_vs_limit":
        limits = {svc.name: svc.mem_limit for svc in (scenario.services if scenario else ())}
        for s in sorted(rows, key=lambda s: s.detail or ""):
            limit = limits.get(s.detail)
            if limit:
                out += finding(s.max, rule.threshold * limit, s.detail, [s.key])
        return out
    for s in sorted(rows, key=lambda s: s.detail or ""):
        if rule.statistic == "mean":
            observed = s.mean
        elif rule.statistic == "rate_per_s":
            if s.total is None or s.duration <= 0:
                continue
            observed = s.total / (s.duration / 1e6)
        else:
            raise ValueError(f"{rule.rule_id}: unknown statistic {rule.statistic!r}")
        out += finding(observed, rule.threshold, s.detail, [s.key])
    return out


def evaluate_rules(stats: Sequence[PhaseStats], scenario=None, baseline=None,
                   rules: Sequence[Rule] | Mapping | None = None,
                   markers: Sequence[PhaseMarker] | None = None) -> list[Finding]:
    """Run the rule catalog. Rules whose metric is missing yield one info finding.

    ``rules`` is a rule list or a mapping of overrides for the default catalog.
    Output is sorted by (rule_id, phase, instance).
    """
    if rules is None or isinstance(rules, Mapping):
        rules = rules_with_overrides(rules)
    out: list[Finding] = []
    for rule in rules:
        if rule.enabled:
            out += _evaluate(rule, stats, scenario, baseline, markers)
    # one finding per (rule, phase, instance)
    seen = {}
    for f in out:
        seen.setdefault(f.sort_key, f)
    return sorted(seen.values(), key=lambda f: f.sort_key)


# -- comparison -----------------------------------------------------------------

DEFAULT_FLAG_PCT = 5.0
MIN_FLAG_PCT = 1.0


@dataclass(frozen=True)
class ComparisonRow:
    phase: str
    sub: str | None
    metric_id: str
    scope: str
    detail: str | None
    unit: str
    value_a: float
    value_b: float
    rel_delta: float | None  # percent; None when value_a == 0
    flagged: bool
    threshold_pct: float

    @property
    def abs_delta(self) -> float:
        return self.value_b - self.value_a

    @property
    def key(self) -> tuple:
        return (self.phase, self.sub, self.metric_id, self.scope, self.detail)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["abs_delta"] = self.abs_delta
        return d


@dataclass
class Comparison:
    run_a: str
    run_b: str
    rows: list[ComparisonRow]
    warnings: list[str] = field(default_factory=list)
    noise_used: bool = False

    def to_dict(self) -> dict:
        return {"run_a": self.run_a, "run_b": self.run_b, "noise_used": self.noise_used,
                "warnings": list(self.warnings), "rows": [r.to_dict() for r in self.rows]}

    @property
    def flagged(self) -> list[ComparisonRow]:
        return [r for r in self.rows if r.flagged]


def _index(stats: Iterable[PhaseStats]) -> dict[tuple, PhaseStats]:
    return {s.key: s for s in stats if s.value is not None}


def noise_from_runs(runs: Sequence[Sequence[PhaseStats]]) -> dict[tuple, float]:
    """Relative population stddev (fraction of |mean|) of each stat across repeated runs."""
    if len(runs) < 2:
        return {}
    indexed = [_index(r) for r in runs]
    common = set(indexed[0]).intersection(*indexed[1:])
    out = {}
    for key in common:
        vals = [float(ix[key].value) for ix in indexed]
        mean = sum(vals) / len(vals)
        if mean == 0:
            continue
        var = sum((v - mean) ** 2 for v in vals) / len(vals)
        out[key] = math.sqrt(var) / abs(mean)
    return out


def compare_runs(a: Sequence[PhaseStats], b: Sequence[PhaseStats], noise: Mapping[tuple, float] | None = None, *,
                 run_a: str = "a", run_b: str = "b", digest_a: str | None = None,
                 digest_b: str | None = None) -> Comparison:
    """Row per (phase, step, metric, scope, detail) present in both runs.

    ``noise`` maps stat keys to relative stddev from repeated runs. A row is
    flagged when |rel_delta| exceeds max(2 × noise, 1%), or 5% without noise
    data for that key. Undefined deltas (value_a == 0) are never flagged.
    """
    ia, ib = _index(a), _index(b)
    warnings = []
    if digest_a and digest_b and digest_a != digest_b:
        warnings.append("runs used different scenarios; only common phases and metrics are compared")
    common = sorted(set(ia) & set(ib), key=lambda k: tuple("" if x is None else str(x) for x in k))
    if not common:
        raise NothingComparable(f"runs {run_a} and {run_b} share no phase/metric")
    rows = []
    noise = noise or {}
    for key in common:
        sa, sb = ia[key], ib[key]
        va, vb = float(sa.value), float(sb.value)
        if key in noise:
            thr = max(2.0 * noise[key] * 100.0, MIN_FLAG_PCT)
        else:
            thr = DEFAULT_FLAG_PCT
        rel = None if va == 0 else (vb - va) / va * 100.0
        rows.append(ComparisonRow(sa.phase, sa.sub, sa.metric_id, sa.scope, sa.detail, sa.unit, va, vb, rel,
                                  rel is not None and abs(rel) > thr, thr))
    return Comparison(run_a, run_b, rows, warnings, bool(noise))


def findings_json(findings: Iterable[Finding]) -> str:
    return json.dumps([f.to_dict() for f in findings], sort_keys=True, ensure_ascii=False)
