"""Metric reporters: one child process per (metric, scope), writing raw sample files.

The orchestrator only spawns and stops reporters. Every bit of parsing and
aggregation happens after the run, from the files (see :mod:`gmt.metrics`).
"""
from __future__ import annotations

import hashlib
import logging
import os
import shutil
import signal
import subprocess
import sys
import time
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

from . import _sampler

log = logging.getLogger(__name__)

MIN_INTERVAL_US = 10_000
MAX_INTERVAL_US = 10_000_000
STOP_GRACE_S = 2.0

UNITS = ("µJ", "mW", "m°C", "bytes", "centi-percent", "count")
U64_MAX = 2**64 - 1


class Sample(NamedTuple):
    t: int
    value: int
    detail: str | None = None


@dataclass(frozen=True)
class MetricDescriptor:
    metric_id: str
    kind: str  # counter | gauge
    unit: str
    source: str
    wrap_max: int | None = None
    scopes: tuple[str, ...] = ("machine",)

    def __post_init__(self):
        if self.kind not in ("counter", "gauge"):
            raise ValueError(f"bad kind {self.kind!r}")
        if self.unit not in UNITS:
            raise ValueError(f"bad unit {self.unit!r}")


DESCRIPTORS: dict[str, MetricDescriptor] = {
    d.metric_id: d
    for d in (
        MetricDescriptor("cpu_util", "gauge", "centi-percent", "/proc/stat; per-instance utime+stime",
                         scopes=("machine", "instance")),
        MetricDescriptor("mem_used", "gauge", "bytes", "/proc/meminfo; per-instance resident set",
                         scopes=("machine", "instance")),
        # wrap_max is replaced by the host's max_energy_range_uj when resolved
        MetricDescriptor("energy_pkg", "counter", "µJ", "powercap package zones energy_uj", wrap_max=U64_MAX),
        MetricDescriptor("machine_power", "gauge", "mW", "external power meter file"),
        MetricDescriptor("temp_cpu", "gauge", "m°C", "hwmon CPU sensor (max over inputs)"),
        MetricDescriptor("disk_io", "counter", "bytes", "/proc/diskstats sectors read+written"),
        MetricDescriptor("net_io", "counter", "bytes", "/proc/net/dev rx+tx per interface"),
        MetricDescriptor("page_faults_major", "counter", "count", "/proc/vmstat pgmajfault; per-instance majflt",
                         scopes=("machine", "instance")),
        # unit is centi-ratio (instructions/cycles x100); it shares the centi-percent scale
        MetricDescriptor("ipc_proxy", "gauge", "centi-percent", "perf_event instructions/cycles"),
    )
}


class ReporterError(Exception):
    pass


class MetricUnavailable(ReporterError):
    pass


class SpawnFailure(ReporterError):
    pass


class ReporterHung(ReporterError):
    pass


class ReporterFailure(ReporterError):
    pass


class FormatError(ValueError):
    def __init__(self, path: str, line: int, text: str):
        self.path = path
        self.line = line
        super().__init__(f"{path}: line {line}: malformed sample {text!r}")


def resolve_descriptor(metric_id: str, root: str = "/") -> MetricDescriptor:
    """Registry entry with host-specific details (energy counter range) filled in."""
    try:
        desc = DESCRIPTORS[metric_id]
    except KeyError:
        raise MetricUnavailable(f"unknown metric {metric_id!r}") from None
    if metric_id == "energy_pkg":
        zones = _sampler.find_rapl_packages(os.path.join(root, "sys/class/powercap"))
        for zone in zones:
            try:
                with open(os.path.join(zone, "max_energy_range_uj")) as fh:
                    return MetricDescriptor(**{**desc.__dict__, "wrap_max": int(fh.read())})
            except (OSError, ValueError):
                continue
    return desc


def check_available(metric_id: str, scope: str = "machine", root: str = "/",
                    options: dict | None = None) -> None:
    """Raise MetricUnavailable unless the metric can be sampled on this host."""
    desc = resolve_descriptor(metric_id, root)
    if scope not in desc.scopes:
        raise MetricUnavailable(f"{metric_id} has no {scope!r} scope")
    if scope == "instance":
        return
    cls = _sampler.SOURCES[(metric_id, scope)]
    try:
        cls({"root": root, "options": options or {}}).close()
    except (_sampler.Unavailable, OSError) as exc:
        raise MetricUnavailable(f"{metric_id}: {exc}") from None


def available_reporters(root: str = "/", options: dict[str, dict] | None = None) -> list[str]:
    options = options or {}
    out = []
    for metric_id in DESCRIPTORS:
        try:
            check_available(metric_id, "machine", root, options.get(metric_id))
        except MetricUnavailable:
            continue
        out.append(metric_id)
    return out


def sample_file_name(metric_id: str, scope: str = "machine") -> str:
    return f"{metric_id}.samples" if scope == "machine" else f"{metric_id}.{scope}.samples"


@dataclass
class ReporterHandle:
    metric_id: str
    scope: str
    output: str
    proc: subprocess.Popen
    started_ns: int
    status: int | None = None
    cpu_time_s: float | None = None
    hung: bool = False
    stderr_path: str | None = field(default=None, repr=False)

    @property
    def pid(self) -> int:
        return self.proc.pid


_native_cache: dict[str, str | None] = {}


def native_sampler() -> str | None:
    """Path of the compiled sampler, building it on first use; None without a compiler.

    The binary is cached under ``$GMT_CACHE`` (default ``~/.cache/gmt``) keyed by
    the source hash, so edits to sampler.c trigger a rebuild.
    """
    src = os.path.join(os.path.dirname(__file__), "sampler.c")
    if src in _native_cache:
        return _native_cache[src]
    path = None
    try:
        with open(src, "rb") as fh:
            digest = hashlib.sha256(fh.read()).hexdigest()[:16]
        cache = os.environ.get("GMT_CACHE") or os.path.join(os.path.expanduser("~"), ".cache", "gmt")
        target = os.path.join(cache, f"sampler-{digest}")
        if os.access(target, os.X_OK):
            path = target
        else:
            cc = os.environ.get("CC") or shutil.which("cc") or shutil.which("gcc")
            if cc:
                os.makedirs(cache, exist_ok=True)
                tmp = f"{target}.{os.getpid()}.tmp"
                res = subprocess.run([cc, "-O2", "-o", tmp, src], capture_output=True, text=True)
                if res.returncode == 0:
                    os.replace(tmp, target)
                    path = target
                else:
                    log.warning("sampler.c failed to compile, using the Python sampler: %s",
                                res.stderr.strip()[:500])
    except OSError as exc:
        log.warning("native sampler unavailable (%s); using the Python sampler", exc)
    _native_cache[src] = path
    return path


def sampler_command() -> list[str]:
    """argv prefix for a sampler child. ``GMT_SAMPLER=python|c`` forces a choice."""
    choice = os.environ.get("GMT_SAMPLER", "").lower()
    if choice != "python":
        native = native_sampler()
        if native:
            return [native]
        if choice == "c":
            raise SpawnFailure("GMT_SAMPLER=c but the native sampler could not be built")
    return [sys.executable, "-S", _sampler.__file__]


def spawn_reporter(metric_id: str, interval: int, output: str, scope: str = "machine", *,
                   t0_ns: int | None = None, instances_file: str | None = None,
                   root: str = "/", script: str | None = None, accel: float | None = None,
                   options: dict | None = None) -> ReporterHandle:
    """Start a sampler child writing to ``output``.

    ``script`` turns the child into a mock that replays (t, value, detail)
    rows instead of reading the host; ``metric_id`` then only names the file.
    """
    if not MIN_INTERVAL_US <= interval <= MAX_INTERVAL_US:
        raise ValueError(f"interval {interval} µs outside [{MIN_INTERVAL_US}, {MAX_INTERVAL_US}]")
    if script is None:
        if metric_id == "mock":
            raise ValueError("mock reporter needs a script")
        check_available(metric_id, scope, root, options)
        if scope == "instance" and not instances_file:
            raise ValueError("instance scope needs instances_file")
    elif not os.path.exists(script):
        raise SpawnFailure(f"mock script not found: {script}")
    cfg = {
        "metric": metric_id,
        "scope": scope,
        "interval_us": interval,
        "output": os.path.abspath(output),
        "t0_ns": time.monotonic_ns() if t0_ns is None else t0_ns,
        "root": root,
    }
    if instances_file:
        cfg["instances_file"] = os.path.abspath(instances_file)
    if script is not None:
        cfg["script"] = os.path.abspath(script)
        if accel:
            cfg["accel"] = accel
    args = [f"{k}={v}" for k, v in cfg.items()]
    args += [f"opt.{k}={v}" for k, v in (options or {}).items()]
    stderr_path = output + ".stderr"
    # create the file up front so a reporter that never samples still leaves one behind
    open(output, "ab").close()
    try:
        with open(stderr_path, "wb") as err:
            proc = subprocess.Popen(
                [*sampler_command(), *args],
                stdin=subprocess.PIPE, stdout=subprocess.DEVNULL, stderr=err,
                close_fds=True,
            )
    except OSError as exc:
        raise SpawnFailure(f"{metric_id}: {exc}") from exc
    return ReporterHandle(metric_id, scope, output, proc, time.monotonic_ns(), stderr_path=stderr_path)


def _reap(pid: int, timeout: float) -> tuple[int, object] | None:
    deadline = time.monotonic() + timeout
    while True:
        try:
            wpid, status, usage = os.wait4(pid, os.WNOHANG)
        except ChildProcessError:
            return 0, None
        if wpid == pid:
            return status, usage
        if time.monotonic() >= deadline:
            return None
        time.sleep(0.005)


def stop_reporter(handle: ReporterHandle, end_t: int | None = None) -> int:
    """Stop the child and return its exit status. Safe to call twice.

    With ``end_t`` given, samples stamped after it are trimmed from the file
    once the child has exited, so the last sample never postdates the run.
    Raises ReporterHung when the child had to be killed.
    """
    if handle.status is not None:
        return handle.status
    msg = b"stop\n" if end_t is None else b"stop %d\n" % end_t
    try:
        handle.proc.stdin.write(msg)
        handle.proc.stdin.close()
    except (BrokenPipeError, OSError, ValueError):
        pass
    reaped = _reap(handle.pid, STOP_GRACE_S)
    if reaped is None:
        handle.hung = True
        try:
            os.kill(handle.pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
        reaped = _reap(handle.pid, 5.0) or (-signal.SIGKILL, None)
    raw_status, usage = reaped
    if usage is not None:
        handle.cpu_time_s = usage.ru_utime + usage.ru_stime
        status = os.waitstatus_to_exitcode(raw_status)
    else:
        status = raw_status
    handle.status = status
    handle.proc.returncode = status
    if end_t is not None:
        trim_after(handle.output, end_t)
    if handle.hung:
        raise ReporterHung(f"{handle.metric_id} did not stop within {STOP_GRACE_S}s; killed")
    return status


def reporter_stderr(handle: ReporterHandle) -> str:
    try:
        with open(handle.stderr_path, encoding="utf-8", errors="replace") as fh:
            return fh.read().strip()
    except (OSError, TypeError):
        return ""


def trim_after(path: str, end_t: int) -> int:
    """Drop trailing lines whose timestamp exceeds end_t; returns lines dropped."""
    with open(path, "rb") as fh:
        lines = fh.read().splitlines(keepends=True)
    keep = len(lines)
    while keep:
        head = lines[keep - 1].split(b"\t", 1)[0]
        if head.isdigit() and int(head) <= end_t and lines[keep - 1].endswith(b"\n"):
            break
        keep -= 1
    dropped = len(lines) - keep
    if dropped:
        with open(path, "wb") as fh:
            fh.writelines(lines[:keep])
            fh.flush()
            os.fsync(fh.fileno())
    return dropped


def format_sample(s: Sample) -> str:
    return _sampler._format(s.t, s.value, s.detail)


def write_samples(path: str, samples: Iterable[Sample], accel: float | None = None) -> None:
    """Write samples in reporter format; also produces mock scripts."""
    with open(path, "w", encoding="ascii") as fh:
        if accel is not None:
            fh.write(f"#accel {accel:g}\n")
        for s in samples:
            fh.write(format_sample(Sample(*s)))


def parse_sample_line(line: str) -> Sample:
    parts = line.split("\t")
    if len(parts) not in (2, 3):
        raise ValueError(line)
    t, value = int(parts[0]), int(parts[1])
    if t < 0:
        raise ValueError(line)
    detail = parts[2] if len(parts) == 3 else None
    if detail == "":
        raise ValueError(line)
    return Sample(t, value, detail)


def read_samples(path: str) -> list[Sample]:
    """Parse a sample file. A truncated final line is dropped with a warning."""
    with open(path, "rb") as fh:
        data = fh.read()
    text = data.decode("ascii", errors="replace")
    lines = text.split("\n")
    truncated = lines.pop()  # text after the last newline; '' for a well-formed file
    out = []
    for lineno, line in enumerate(lines, start=1):
        if line.startswith("#") or not line:
            continue
        try:
            out.append(parse_sample_line(line))
        except ValueError:
            raise FormatError(path, lineno, line) from None
    if truncated:
        log.warning("%s: dropping truncated final line %r", path, truncated)
    return out


INSTANCE_METRICS = tuple(m for m, d in DESCRIPTORS.items() if "instance" in d.scopes)


@dataclass(frozen=True)
class ReporterSpec:
    """One reporter to run: a metric at a scope, optionally replayed from a mock script."""

    metric_id: str
    scope: str = "machine"
    script: str | None = None
    options: tuple[tuple[str, str], ...] = ()

    @property
    def name(self) -> str:
        return self.metric_id if self.scope == "machine" else f"{self.metric_id}.{self.scope}"

    @property
    def key(self) -> tuple[str, str]:
        return (self.metric_id, self.scope)


def parse_reporter_id(rid: str) -> ReporterSpec:
    """``cpu_util`` is machine scope, ``cpu_util.instance`` per instance."""
    metric_id, _, scope = rid.partition(".")
    scope = scope or "machine"
    if metric_id not in DESCRIPTORS:
        raise MetricUnavailable(f"unknown reporter {rid!r}")
    if scope not in DESCRIPTORS[metric_id].scopes:
        raise MetricUnavailable(f"{metric_id} has no {scope!r} scope")
    return ReporterSpec(metric_id, scope)


def default_reporters(root: str = "/", options: dict[str, dict] | None = None) -> list[ReporterSpec]:
    """Every reporter available on the host, plus the per-instance variants."""
    specs = [ReporterSpec(m, options=tuple(sorted((options or {}).get(m, {}).items())))
             for m in available_reporters(root, options)]
    specs += [ReporterSpec(m, "instance") for m in INSTANCE_METRICS]
    return specs


class ReporterSet:
    """Starts and stops a group of reporters writing into one raw directory."""

    def __init__(self, specs: Iterable[ReporterSpec], raw_dir: str, interval: int, t0_ns: int, *,
                 instances_file: str | None = None, root: str = "/", accel: float | None = None):
        self.specs = list(specs)
        self.raw_dir = raw_dir
        self.interval = interval
        self.t0_ns = t0_ns
        self.instances_file = instances_file
        self.root = root
        self.accel = accel
        self.handles: list[ReporterHandle] = []
        self.failures: list[str] = []

    def path(self, spec: ReporterSpec) -> str:
        return os.path.join(self.raw_dir, sample_file_name(spec.metric_id, spec.scope))

    def start(self) -> None:
        os.makedirs(self.raw_dir, exist_ok=True)
        try:
            for spec in self.specs:
                self.handles.append(spawn_reporter(
                    spec.metric_id, self.interval, self.path(spec), spec.scope,
                    t0_ns=self.t0_ns, instances_file=self.instances_file, root=self.root,
                    script=spec.script, accel=self.accel, options=dict(spec.options)))
        except BaseException:
            self.stop()
            raise

    def stop(self, end_t: int | None = None) -> list[str]:
        """Stop every reporter; returns (and records) one message per misbehaving child."""
        for h in self.handles:
            try:
                status = stop_reporter(h, end_t)
            except ReporterHung as exc:
                self.failures.append(str(exc))
                continue
            if status != 0:
                err = reporter_stderr(h)
                self.failures.append(f"{h.metric_id}.{h.scope} exited with status {status}"
                                     + (f": {err}" if err else ""))
        return self.failures

    @property
    def cpu_time_s(self) -> float:
        return sum(h.cpu_time_s or 0.0 for h in self.handles)

    def alive(self) -> list[int]:
        return [h.pid for h in self.handles if h.status is None and h.proc.poll() is None]

    def series(self) -> dict[tuple[str, str], list[Sample]]:
        out = {}
        for spec in self.specs:
            path = self.path(spec)
            if os.path.exists(path):
                out[spec.key] = read_samples(path)
        return out
