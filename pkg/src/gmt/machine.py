"""Pre-measurement host checks and idle calibration.

Preflight only reads the host. Writing CPU frequency controls is a separate,
explicit operation (:func:`apply_cpu_settings`).
"""
from __future__ import annotations

import glob
import json
import os
import platform
import shutil
import subprocess
import tempfile
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Callable, Sequence

from . import metrics
from .clock import RealClock
from .reporters import DESCRIPTORS, ReporterSet, ReporterSpec, _sampler, available_reporters, resolve_descriptor

RUN_ENV = "GMT_RUN_ID"
CONTAINER_LABEL = "gmt.run"
CALIBRATION_FILE = "calibration.json"
MIN_CALIBRATION_US = 10_000_000

CHECKS = ("cpu_temperature", "turbo_boost", "governor", "interrupt_rate", "foreign_processes", "calibration")


class IncomparableError(Exception):
    pass


class CalibrationError(Exception):
    pass


@dataclass(frozen=True)
class CheckResult:
    check_id: str
    status: str  # pass | warn | fail
    observed: str
    threshold: str
    message: str

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CalibrationBaseline:
    created_at: str
    duration: int
    avg_power: float | None
    avg_cpu_util: int | None
    avg_temp: int | None
    machine_fingerprint: str

    def __post_init__(self):
        if self.duration < MIN_CALIBRATION_US:
            raise ValueError(f"calibration duration {self.duration} µs below {MIN_CALIBRATION_US}")
        for name in ("avg_power", "avg_cpu_util", "avg_temp"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationBaseline":
        return cls(**{k: d.get(k) for k in cls.__dataclass_fields__})


@dataclass
class PreflightConfig:
    root: str = "/"
    temp_threshold: int = 65_000  # m°C
    irq_threshold: float = 2_000.0  # interrupts per second
    irq_window_s: float = 1.0
    governor: str = "performance"
    store_path: str | None = None
    checks: tuple[str, ...] = CHECKS
    run_id: str | None = None  # our own run; its processes are not foreign
    container_cli: str | None = None  # e.g. "docker"; None skips the container scan
    sleep: Callable[[float], None] = time.sleep
    monotonic: Callable[[], float] = time.monotonic


def _read(path: str) -> str | None:
    try:
        with open(path, encoding="utf-8", errors="replace") as fh:
            return fh.read().strip()
    except OSError:
        return None


def _p(root: str, rel: str) -> str:
    return os.path.join(root, rel)


def machine_fingerprint(root: str = "/") -> str:
    """CPU model, core count and kernel release, ``|``-separated."""
    cpuinfo = _read(_p(root, "proc/cpuinfo")) or ""
    model = "unknown"
    cores = 0
    for line in cpuinfo.splitlines():
        key, _, value = line.partition(":")
        key = key.strip()
        if key == "processor":
            cores += 1
        elif key in ("model name", "Model", "cpu model") and model == "unknown":
            model = value.strip()
    if not cores:
        cores = (os.cpu_count() or 1) if root == "/" else 0
    kernel = _read(_p(root, "proc/sys/kernel/osrelease"))
    if kernel is None:
        kernel = platform.release() if root == "/" else "unknown"
    return f"{model}|{cores}|{kernel}"


# -- checks ---------------------------------------------------------------------

def check_cpu_temperature(cfg: PreflightConfig) -> CheckResult:
    thr = f"< {cfg.temp_threshold} m°C"
    values = []
    for path in _sampler.find_cpu_temp_inputs(cfg.root):
        raw = _read(path)
        try:
            values.append(int(raw))
        except (TypeError, ValueError):
            continue
    if not values:
        return CheckResult("cpu_temperature", "warn", "unreadable", thr, "cannot verify: no CPU temperature sensor")
    t = max(values)
    if t >= cfg.temp_threshold:
        return CheckResult("cpu_temperature", "fail", f"{t} m°C", thr, "CPU too hot; let it cool down")
    return CheckResult("cpu_temperature", "pass", f"{t} m°C", thr, "ok")


TURBO_FILES = (
    # (path, value meaning "turbo disabled")
    ("sys/devices/system/cpu/intel_pstate/no_turbo", "1"),
    ("sys/devices/system/cpu/cpufreq/boost", "0"),
)


def check_turbo_boost(cfg: PreflightConfig) -> CheckResult:
    for rel, disabled in TURBO_FILES:
        raw = _read(_p(cfg.root, rel))
        if raw is None:
            continue
        if raw == disabled:
            return CheckResult("turbo_boost", "pass", f"{rel}={raw}", f"{rel}={disabled}", "turbo disabled")
        return CheckResult("turbo_boost", "fail", f"{rel}={raw}", f"{rel}={disabled}",
                           "turbo boost enabled; disable it or pass --apply-cpu-settings")
    return CheckResult("turbo_boost", "warn", "unreadable", "disabled", "cannot verify turbo boost state")


def _governor_files(root: str) -> list[str]:
    return sorted(glob.glob(_p(root, "sys/devices/system/cpu/cpu[0-9]*/cpufreq/scaling_governor")))


def check_governor(cfg: PreflightConfig) -> CheckResult:
    seen = {}
    for path in _governor_files(cfg.root):
        raw = _read(path)
        if raw is not None:
            seen[path.split("/cpufreq/")[0].rsplit("/", 1)[-1]] = raw
    if not seen:
        return CheckResult("governor", "warn", "unreadable", cfg.governor, "cannot verify frequency governor")
    bad = {cpu: g for cpu, g in seen.items() if g != cfg.governor}
    observed = ",".join(sorted(set(seen.values())))
    if bad:
        return CheckResult("governor", "fail", observed, cfg.governor,
                           "governor differs on " + ", ".join(sorted(bad)))
    return CheckResult("governor", "pass", observed, cfg.governor, "ok")


def read_interrupt_total(root: str = "/") -> int | None:
    text = _read(_p(root, "proc/stat"))
    if text is None:
        return None
    for line in text.splitlines():
        if line.startswith("intr "):
            try:
                return int(line.split()[1])
            except (IndexError, ValueError):
                return None
    return None


def check_interrupt_rate(cfg: PreflightConfig) -> CheckResult:
    thr = f"< {cfg.irq_threshold:g}/s"
    a = read_interrupt_total(cfg.root)
    t_a = cfg.monotonic()
    cfg.sleep(cfg.irq_window_s)
    b = read_interrupt_total(cfg.root)
    t_b = cfg.monotonic()
    if a is None or b is None or t_b <= t_a:
        return CheckResult("interrupt_rate", "warn", "unreadable", thr, "cannot read the interrupt counter")
    rate = (b - a) / (t_b - t_a)
    observed = f"{rate:.0f}/s"
    if rate >= cfg.irq_threshold:
        return CheckResult("interrupt_rate", "fail", observed, thr, "host too busy; stop background activity")
    return CheckResult("interrupt_rate", "pass", observed, thr, "ok")


def find_run_processes(root: str = "/", exclude_run: str | None = None) -> list[tuple[int, str]]:
    """(pid, run id) of processes carrying the run marker in their environment."""
    marker = (RUN_ENV + "=").encode()
    out = []
    for entry in sorted(os.listdir(_p(root, "proc")), key=lambda e: (len(e), e)):
        if not entry.isdigit() or int(entry) == os.getpid():
            continue
        try:
            with open(_p(root, f"proc/{entry}/environ"), "rb") as fh:
                env = fh.read()
        except OSError:
            continue
        for item in env.split(b"\0"):
            if item.startswith(marker):
                run = item[len(marker):].decode(errors="replace")
                if run != exclude_run:
                    out.append((int(entry), run))
                break
    return out


def find_run_containers(cli: str) -> list[str]:
    if not shutil.which(cli):
        return []
    try:
        res = subprocess.run([cli, "ps", "-a", "-q", "--filter", f"label={CONTAINER_LABEL}"],
                             capture_output=True, text=True, timeout=30)
    except (OSError, subprocess.TimeoutExpired):
        return []
    return res.stdout.split() if res.returncode == 0 else []


def check_foreign_processes(cfg: PreflightConfig) -> CheckResult:
    procs = find_run_processes(cfg.root, cfg.run_id)
    containers = find_run_containers(cfg.container_cli) if cfg.container_cli else []
    if procs or containers:
        parts = [f"pid {pid} (run {run})" for pid, run in procs] + [f"container {c}" for c in containers]
        return CheckResult("foreign_processes", "fail", "; ".join(parts), "none",
                           "leftovers from earlier runs are still alive")
    return CheckResult("foreign_processes", "pass", "none", "none", "ok")


def calibration_path(store_path: str) -> str:
    return os.path.join(store_path, CALIBRATION_FILE)


def load_baseline(store_path: str) -> CalibrationBaseline | None:
    try:
        with open(calibration_path(store_path), encoding="utf-8") as fh:
            return CalibrationBaseline.from_dict(json.load(fh))
    except FileNotFoundError:
        return None


def save_baseline(store_path: str, baseline: CalibrationBaseline) -> str:
    from .store import atomic_write_json
    os.makedirs(store_path, exist_ok=True)
    path = calibration_path(store_path)
    atomic_write_json(path, baseline.to_dict())
    return path


def check_calibration(cfg: PreflightConfig) -> CheckResult:
    fp = machine_fingerprint(cfg.root)
    if not cfg.store_path:
        return CheckResult("calibration", "warn", "no store", fp, "no store configured; cannot look up a baseline")
    try:
        base = load_baseline(cfg.store_path)
    except (OSError, ValueError, TypeError) as exc:
        return CheckResult("calibration", "warn", "unreadable", fp, f"calibration file unreadable: {exc}")
    if base is None:
        return CheckResult("calibration", "warn", "missing", fp, "no calibration baseline; run `gmt calibrate`")
    if base.machine_fingerprint != fp:
        return CheckResult("calibration", "fail", base.machine_fingerprint, fp,
                           "baseline was recorded on different hardware or kernel; recalibrate")
    return CheckResult("calibration", "pass", base.machine_fingerprint, fp, f"baseline from {base.created_at}")


_CHECK_FUNCS = {
    "cpu_temperature": check_cpu_temperature,
    "turbo_boost": check_turbo_boost,
    "governor": check_governor,
    "interrupt_rate": check_interrupt_rate,
    "foreign_processes": check_foreign_processes,
    "calibration": check_calibration,
}


def run_preflight(config: PreflightConfig | None = None) -> list[CheckResult]:
    """One result per enabled check. Never raises for host problems."""
    cfg = config or PreflightConfig()
    out = []
    for check_id in cfg.checks:
        try:
            out.append(_CHECK_FUNCS[check_id](cfg))
        except KeyError:
            raise ValueError(f"unknown check {check_id!r}") from None
        except OSError as exc:
            out.append(CheckResult(check_id, "warn", "error", "", f"cannot verify: {exc}"))
    return out


def preflight_failed(results: Sequence[CheckResult]) -> bool:
    return any(r.status == "fail" for r in results)


def apply_cpu_settings(root: str = "/", governor: str = "performance") -> list[str]:
    """Disable turbo and set the governor on every CPU. Returns the files written.

    Only called when the operator opts in with ``--apply-cpu-settings``.
    """
    written = []
    for rel, disabled in TURBO_FILES:
        path = _p(root, rel)
        if os.path.exists(path):
            with open(path, "w") as fh:
                fh.write(disabled)
            written.append(path)
    for path in _governor_files(root):
        with open(path, "w") as fh:
            fh.write(governor)
        written.append(path)
    return written


# -- calibration ----------------------------------------------------------------

CALIBRATION_METRICS = ("machine_power", "energy_pkg", "cpu_util", "temp_cpu")


def calibrate(duration: int, reporters: Sequence[ReporterSpec] | None = None, *, store_path: str | None = None,
              root: str = "/", interval: int = 100_000, clock=None, accel: float | None = None,
              raw_dir: str | None = None) -> CalibrationBaseline:
    """Measure the idle host for ``duration`` µs and persist the baseline.

    ``reporters`` defaults to whichever of power, energy, CPU utilization and
    temperature are available. Raises ReporterFailure if a reporter exits
    nonzero or hangs.
    """
    from .reporters import ReporterFailure

    if duration < MIN_CALIBRATION_US:
        raise ValueError(f"calibration needs at least {MIN_CALIBRATION_US} µs, got {duration}")
    if reporters is None:
        avail = set(available_reporters(root))
        reporters = [ReporterSpec(m) for m in CALIBRATION_METRICS if m in avail]
    clock = clock or RealClock()
    own_tmp = raw_dir is None
    raw_dir = raw_dir or tempfile.mkdtemp(prefix="gmt-calibrate-")
    try:
        rset = ReporterSet(reporters, raw_dir, interval, clock.t0_ns, root=root, accel=accel)
        rset.start()
        start = clock.now()
        try:
            clock.sleep(duration)
        finally:
            end = clock.now()
            failures = rset.stop(end)
        if failures:
            raise ReporterFailure("; ".join(failures))
        series = rset.series()
    finally:
        if own_tmp:
            shutil.rmtree(raw_dir, ignore_errors=True)
    descriptors = {m: resolve_descriptor(m, root) for m in DESCRIPTORS}
    marker = metrics.PhaseMarker("baseline", start, end)
    stats = metrics.phase_stats(series, [marker], descriptors).stats

    def mean_of(metric_id):
        rows = metrics.find_stats(stats, "baseline", metric_id, "machine")
        return rows[0].mean if rows and rows[0].mean is not None else None

    power = metrics.avg_power_mw(stats, "baseline")
    cpu = mean_of("cpu_util")
    temp = mean_of("temp_cpu")
    baseline = CalibrationBaseline(
        created_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
        duration=end - start,
        avg_power=None if power is None else round(power, 3),
        avg_cpu_util=None if cpu is None else int(round(cpu)),
        avg_temp=None if temp is None else int(round(temp)),
        machine_fingerprint=machine_fingerprint(root),
    )
    if store_path:
        save_baseline(store_path, baseline)
    return baseline


def check_baseline_drift(current: Sequence[metrics.PhaseStats] | float | None, ref: CalibrationBaseline | None,
                         tolerance: float = 5.0) -> CheckResult:
    """Compare a run's baseline-phase power against the calibration (tolerance in percent)."""
    if isinstance(current, (int, float)) or current is None:
        cur = current
    else:
        cur = metrics.avg_power_mw(current, "baseline")
    if ref is None or ref.avg_power is None or cur is None:
        raise IncomparableError("average power missing on one side")
    if ref.avg_power == 0:
        raise IncomparableError("reference average power is 0; relative drift undefined")
    drift = abs(cur - ref.avg_power) / ref.avg_power * 100.0
    observed = f"{drift:.2f}% ({cur:.0f} mW vs {ref.avg_power:.0f} mW)"
    if drift > tolerance:
        return CheckResult("baseline_drift", "warn", observed, f"<= {tolerance:g}%",
                           "baseline power drifted from calibration")
    return CheckResult("baseline_drift", "pass", observed, f"<= {tolerance:g}%", "ok")
