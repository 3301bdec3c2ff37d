"""One measurement run end to end.

preflight, reporters up, then baseline, installation, boot, idle, runtime
(one sub-marker per flow step) and removal, reporters down, aggregation,
rules, optional advisor, save. Any phase error aborts the run but the
reporters are still stopped and the partial run is saved.
"""
from __future__ import annotations

import logging
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from . import advisor as advisor_mod
from . import analysis, machine, metrics
from .backend import BackendError, StepFailure, StepTimeout, make_backend
from .clock import RealClock, VirtualClock
from .reporters import (DESCRIPTORS, ReporterError, ReporterSet, ReporterSpec,
                        check_available, default_reporters, parse_reporter_id, resolve_descriptor)
from .scenario import UsageScenario, load_scenario, scenario_digest, scenario_to_dict
from .store import RunRecord, Store, new_run_id, utc_now

log = logging.getLogger(__name__)

DEFAULT_BASELINE_US = 30_000_000
DEFAULT_IDLE_US = 30_000_000
MAX_REPETITIONS = 100


class ConfigError(ValueError):
    pass


class PreflightFailed(Exception):
    def __init__(self, results: Sequence[machine.CheckResult]):
        self.results = list(results)
        bad = [r.check_id for r in results if r.status == "fail"]
        super().__init__("preflight failed: " + ", ".join(bad))


@dataclass
class RunConfig:
    scenario_path: str
    store_path: str
    backend_kind: str = "process"
    skip_checks: bool = False
    repetitions: int = 1
    reporters: Sequence[ReporterSpec] | None = None  # None: the scenario's list, else all available
    mock_scripts: Mapping[str, str] = field(default_factory=dict)  # reporter name -> script
    reporter_options: Mapping[str, Mapping[str, str]] = field(default_factory=dict)
    advisor_enabled: bool = False
    advisor_config: Mapping | None = None
    annotations_path: str | None = None
    advisor_mode: str = "improve"
    baseline_us: int = DEFAULT_BASELINE_US
    idle_us: int = DEFAULT_IDLE_US
    time_accel: float | None = None  # virtual time; requires every reporter to be a mock
    quantum_us: int = 1_000_000
    continue_on_error: bool = False
    rules: Mapping | Sequence | None = None
    preflight: machine.PreflightConfig | None = None
    root: str = "/"
    engine: str = "docker"
    drift_tolerance: float = 5.0

    def validate(self) -> None:
        if not 1 <= self.repetitions <= MAX_REPETITIONS:
            raise ConfigError(f"repetitions must be in 1..{MAX_REPETITIONS}")
        if self.backend_kind not in ("process", "container"):
            raise ConfigError(f"unknown backend {self.backend_kind!r}")
        if self.baseline_us <= 0 or self.idle_us <= 0:
            raise ConfigError("baseline and idle durations must be positive")
        if self.time_accel is not None and self.time_accel <= 0:
            raise ConfigError("time_accel must be positive")
        if self.advisor_mode not in advisor_mod.MODES:
            raise ConfigError(f"advisor mode must be one of {advisor_mod.MODES}")


def resolve_reporters(config: RunConfig, scenario: UsageScenario) -> list[ReporterSpec]:
    opts = {k: dict(v) for k, v in config.reporter_options.items()}
    if config.reporters is not None:
        specs = list(config.reporters)
    elif scenario.reporters:
        specs = [parse_reporter_id(r) for r in scenario.reporters]
    elif config.time_accel is not None:
        specs = []
    else:
        specs = default_reporters(config.root, opts)
    specs = [ReporterSpec(s.metric_id, s.scope, s.script, s.options or tuple(sorted(opts.get(s.metric_id, {}).items())))
             for s in specs]
    by_name = {s.name: s for s in specs}
    for name, script in sorted(config.mock_scripts.items()):
        base = parse_reporter_id(name)
        by_name[name] = ReporterSpec(base.metric_id, base.scope, script)
    specs = list(by_name.values())
    if config.time_accel is not None:
        real = [s.name for s in specs if s.script is None]
        if real:
            raise ConfigError(f"virtual time needs mock reporters only; real: {', '.join(real)}")
    for s in specs:
        if s.script is None:
            check_available(s.metric_id, s.scope, config.root, dict(s.options))
    return specs


class _Phases:
    """Marker bookkeeping. Top-level phases stay ordered and disjoint; step
    markers nest inside the open runtime phase and stay disjoint too."""

    def __init__(self, clock):
        self.clock = clock
        self.markers: list[metrics.PhaseMarker] = []
        self.stack: list[tuple[str, int, str | None]] = []
        self.last_end = 0
        self.last_sub_end = 0

    def begin(self, phase: str, sub: str | None = None) -> None:
        now = self.clock.now()
        if sub is None:
            start = max(now, self.last_end)
            self.last_sub_end = start
        else:
            start = max(now, self.last_sub_end)
        self.stack.append((phase, start, sub))

    def end(self) -> None:
        phase, start, sub = self.stack.pop()
        if self.clock.virtual and self.clock.now() == start:
            self.clock.step()
        end = max(self.clock.now(), start + 1)
        if sub is None:
            end = max(end, self.last_sub_end)
            self.last_end = end
        else:
            self.last_sub_end = end
        self.markers.append(metrics.PhaseMarker(phase, start, end, sub))

    def close_all(self) -> None:
        while self.stack:
            self.end()


def cmd_run(config: RunConfig) -> list[str]:
    """Run the scenario ``repetitions`` times; returns the run ids (aborted runs included)."""
    config.validate()
    scenario = load_scenario(config.scenario_path)
    if not config.skip_checks:
        pf = config.preflight or machine.PreflightConfig(
            root=config.root, store_path=config.store_path,
            container_cli=config.engine if config.backend_kind == "container" else None)
        results = machine.run_preflight(pf)
        if machine.preflight_failed(results):
            raise PreflightFailed(results)
    specs = resolve_reporters(config, scenario)
    return [run_once(config, scenario, specs) for _ in range(config.repetitions)]


def run_once(config: RunConfig, scenario: UsageScenario, specs: Sequence[ReporterSpec]) -> str:
    store = Store(config.store_path)
    run_id = new_run_id()
    run_dir = store.run_dir(run_id)
    raw_dir = os.path.join(run_dir, "raw")
    os.makedirs(raw_dir, exist_ok=True)
    instances_file = os.path.join(run_dir, "instances.tsv")
    open(instances_file, "w").close()

    clock = VirtualClock(config.time_accel, config.quantum_us) if config.time_accel else RealClock()
    rset = ReporterSet(specs, raw_dir, scenario.sampling_interval, clock.t0_ns, instances_file=instances_file,
                       root=config.root, accel=config.time_accel)
    workdir = tempfile.mkdtemp(prefix=f"gmt-{run_id}-")
    backend = None
    phases = _Phases(clock)
    status, reason = "completed", None
    warnings: list[str] = []
    started_at = utc_now()
    try:
        backend = make_backend(config.backend_kind, workdir, clock=clock, instances_file=instances_file,
                               run_id=run_id, log_dir=os.path.join(run_dir, "logs"),
                               **({"engine": config.engine} if config.backend_kind == "container" else {}))
        rset.start()
        phases.begin("baseline")
        clock.sleep(config.baseline_us)
        phases.end()

        phases.begin("installation")
        backend.install(scenario)
        phases.end()

        phases.begin("boot")
        handle = backend.boot(scenario)
        phases.end()

        phases.begin("idle")
        clock.sleep(config.idle_us)
        phases.end()

        phases.begin("runtime")
        for step in scenario.flow:
            phases.begin("runtime", step.name)
            try:
                backend.exec_step(handle, step)
            except (StepFailure, StepTimeout) as exc:
                if not config.continue_on_error:
                    raise
                warnings.append(f"continued after: {exc}")
            finally:
                clock.step()
            phases.end()
        phases.end()

        phases.begin("removal")
        backend.teardown(handle)
        phases.end()
    except (BackendError, ReporterError, OSError, ValueError) as exc:
        status, reason = "aborted", f"{type(exc).__name__}: {exc}"
        log.error("run %s aborted: %s", run_id, reason)
        phases.close_all()
    except BaseException as exc:
        status, reason = "aborted", f"interrupted: {type(exc).__name__}"
        phases.close_all()
        _cleanup(backend, rset, clock, warnings)
        _save(store, config, scenario, run_id, started_at, phases.markers, rset, status, reason, warnings)
        raise
    _cleanup(backend, rset, clock, warnings)
    shutil.rmtree(workdir, ignore_errors=True)
    try:
        os.unlink(instances_file)
    except OSError:
        pass
    return _save(store, config, scenario, run_id, started_at, phases.markers, rset, status, reason, warnings)


def _cleanup(backend, rset: ReporterSet, clock, warnings: list[str]) -> None:
    if backend is not None:
        try:
            backend.teardown()
        except BackendError as exc:
            warnings.append(f"cleanup: {exc}")
    warnings.extend(rset.stop(clock.now()))


def _save(store: Store, config: RunConfig, scenario: UsageScenario, run_id: str, started_at: str,
          markers: list[metrics.PhaseMarker], rset: ReporterSet, status: str, reason: str | None,
          warnings: list[str]) -> str:
    markers = sorted(markers, key=lambda m: (m.start, m.sub is not None, m.end))
    stats: list[metrics.PhaseStats] = []
    unassigned: dict[str, int] = {}
    descriptors = {m: resolve_descriptor(m, config.root) for m in DESCRIPTORS}
    try:
        series = rset.series()
        if markers:
            res = metrics.phase_stats(series, markers, descriptors)
            stats, unassigned = res.stats, res.unassigned
            warnings.extend(res.warnings)
    except (metrics.MetricsError, ValueError, OSError) as exc:
        warnings.append(f"aggregation failed: {exc}")

    baseline = None
    try:
        baseline = machine.load_baseline(config.store_path)
    except (OSError, ValueError, TypeError) as exc:
        warnings.append(f"calibration file unreadable: {exc}")
    if baseline is not None and stats:
        try:
            drift = machine.check_baseline_drift(stats, baseline, config.drift_tolerance)
            if drift.status != "pass":
                warnings.append(f"baseline drift: {drift.observed}")
        except machine.IncomparableError:
            pass

    findings = analysis.evaluate_rules(stats, scenario, baseline, config.rules, markers) if stats else []
    recs = []
    if config.advisor_enabled and config.annotations_path and stats:
        try:
            anns = advisor_mod.load_annotations(config.annotations_path)
            recs = advisor_mod.advise(findings, anns, mode=config.advisor_mode,
                                      provider_config=config.advisor_config, stats=stats)
        except (advisor_mod.AdvisorError, OSError, ValueError) as exc:
            warnings.append(f"advisor: {exc}")

    record = RunRecord(
        run_id=run_id,
        scenario_digest=scenario_digest(scenario),
        scenario_name=scenario.name,
        machine_fingerprint=machine.machine_fingerprint(config.root),
        started_at=started_at,
        finished_at=utc_now(),
        markers=markers,
        stats=stats,
        findings=findings,
        recommendations=recs,
        status=status,
        reason=reason,
        scenario=scenario_to_dict(scenario),
        warnings=warnings,
        unassigned=unassigned,
    )
    return store.save_run(record)
