"""Execution environments: bare processes, or containers through an engine CLI.

Services boot one after another in declaration order. Each backend keeps an
instances file (``<service>\\t<pid>`` lines) that per-instance reporters use
to find the processes belonging to a service.
"""
from __future__ import annotations

import os
import re
import shutil
import signal
import socket
import subprocess
import time
from dataclasses import dataclass, field

from .clock import RealClock
from .scenario import FlowStep, ReadinessProbe, ServiceSpec, UsageScenario

RUN_ENV = "GMT_RUN_ID"
CONTAINER_LABEL = "gmt.run"
OUTPUT_LIMIT = 64 * 1024
TERM_GRACE_S = 5.0
PROBE_POLL_S = 0.05


class BackendError(Exception):
    pass


class EngineUnavailable(BackendError):
    pass


class BuildFailure(BackendError):
    def __init__(self, service: str, command: str, status: int, output: str = ""):
        self.service = service
        self.command = command
        self.status = status
        self.output = output
        super().__init__(f"{service}: build step {command!r} exited with status {status}")


class BootTimeout(BackendError):
    def __init__(self, service: str, probe: ReadinessProbe):
        self.service = service
        super().__init__(f"{service}: readiness probe {probe.kind} {probe.value!r} "
                         f"did not succeed within {probe.timeout} µs")


class ProbeError(BackendError):
    pass


class StepTimeout(BackendError):
    def __init__(self, step: str, timeout: int, output: str = ""):
        self.step = step
        self.output = output
        super().__init__(f"step {step!r} exceeded its timeout of {timeout} µs")


class StepFailure(BackendError):
    def __init__(self, step: str, status: int, output: str = ""):
        self.step = step
        self.status = status
        self.output = output
        super().__init__(f"step {step!r} exited with status {status}")


class TeardownIncomplete(BackendError):
    def __init__(self, survivors: list[str]):
        self.survivors = survivors
        super().__init__("teardown left resources behind: " + ", ".join(survivors))


@dataclass
class BackendHandle:
    backend_kind: str  # container | process
    instances: dict[str, str]  # service -> pid or container id
    workdir: str


@dataclass
class StepResult:
    step: str
    status: int
    output: str


@dataclass
class TeardownReport:
    removed: list[str] = field(default_factory=list)
    already_gone: list[str] = field(default_factory=list)
    noop: bool = False


def _clip(text: str) -> str:
    return text if len(text) <= OUTPUT_LIMIT else text[:OUTPUT_LIMIT] + "\n[output clipped]\n"


def _port_open(host: str, port: int) -> bool:
    try:
        with socket.create_connection((host, port), timeout=0.2):
            return True
    except OSError:
        return False


def _parse_port(value: str) -> tuple[str, int]:
    host, _, port = str(value).rpartition(":")
    return host or "127.0.0.1", int(port)


class _Base:
    kind = "base"

    def __init__(self, workdir: str, *, clock=None, instances_file: str | None = None,
                 run_id: str | None = None, log_dir: str | None = None):
        self.workdir = os.path.abspath(workdir)
        self.clock = clock or RealClock()
        self.instances_file = instances_file
        self.run_id = run_id or "adhoc"
        self.log_dir = log_dir
        self.handle: BackendHandle | None = None
        self._instance_lines: list[tuple[str, int]] = []
        self._torn_down = False

    # instances file maintenance; rewritten atomically so reporters never read half a line
    def _write_instances(self) -> None:
        if not self.instances_file:
            return
        tmp = self.instances_file + ".tmp"
        with open(tmp, "w") as fh:
            fh.writelines(f"{name}\t{pid}\n" for name, pid in self._instance_lines)
        os.replace(tmp, self.instances_file)

    def _add_instance(self, name: str, pid: int) -> None:
        self._instance_lines.append((name, pid))
        self._write_instances()

    def _drop_instance(self, name: str, pid: int) -> None:
        if (name, pid) in self._instance_lines:
            self._instance_lines.remove((name, pid))
            self._write_instances()

    def _wait_probe(self, svc: ServiceSpec, check, alive) -> None:
        probe = svc.boot_ready
        if probe.kind == "fixed-delay":
            self.clock.sleep(int(probe.value))
            return
        deadline = time.monotonic() + probe.timeout / 1e6
        while True:
            try:
                if check():
                    return
            except (OSError, ValueError) as exc:
                raise ProbeError(f"{svc.name}: probe failed: {exc}") from exc
            if not alive():
                # one last look: the service may have logged and exited in between
                if check():
                    return
                raise ProbeError(f"{svc.name}: exited before becoming ready")
            if time.monotonic() >= deadline:
                raise BootTimeout(svc.name, probe)
            time.sleep(PROBE_POLL_S)


class ProcessBackend(_Base):
    """Services are shell commands, each the leader of its own session."""

    kind = "process"

    def __init__(self, workdir: str, **kw):
        super().__init__(workdir, **kw)
        self.procs: dict[str, subprocess.Popen] = {}
        self._logs: dict[str, str] = {}
        self._scenario: UsageScenario | None = None

    def _env(self, svc: ServiceSpec) -> dict[str, str]:
        env = dict(os.environ)
        env.update(svc.env)
        env[RUN_ENV] = self.run_id
        return env

    def install(self, s: UsageScenario) -> list[int]:
        os.makedirs(self.workdir, exist_ok=True)
        statuses = []
        for svc in s.services:
            for cmd in svc.build_steps:
                res = subprocess.run(cmd, shell=True, cwd=self.workdir, env=self._env(svc),
                                     stdout=subprocess.PIPE, stderr=subprocess.STDOUT, start_new_session=True)
                statuses.append(res.returncode)
                if res.returncode != 0:
                    raise BuildFailure(svc.name, cmd, res.returncode,
                                       _clip(res.stdout.decode("utf-8", "replace")))
        return statuses

    def boot(self, s: UsageScenario) -> BackendHandle:
        os.makedirs(self.workdir, exist_ok=True)
        self._scenario = s
        self.handle = BackendHandle(self.kind, {}, self.workdir)
        for svc in s.services:
            log_path = os.path.join(self.workdir, f"{svc.name}.log")
            self._logs[svc.name] = log_path
            with open(log_path, "wb") as log:
                proc = subprocess.Popen(svc.image_or_command, shell=True, cwd=self.workdir, env=self._env(svc),
                                        stdin=subprocess.DEVNULL, stdout=log, stderr=subprocess.STDOUT,
                                        start_new_session=True)
            self.procs[svc.name] = proc
            self.handle.instances[svc.name] = str(proc.pid)
            self._add_instance(svc.name, proc.pid)
            self._wait_probe(svc, self._checker(svc, log_path), lambda p=proc: p.poll() is None)
        return self.handle

    def _checker(self, svc: ServiceSpec, log_path: str):
        probe = svc.boot_ready
        if probe.kind == "port-open":
            host, port = _parse_port(probe.value)
            return lambda: _port_open(host, port)
        if probe.kind == "log-pattern":
            pattern = re.compile(str(probe.value))

            def check():
                with open(log_path, "rb") as fh:
                    return pattern.search(fh.read().decode("utf-8", "replace")) is not None
            return check
        return lambda: True

    def exec_step(self, h: BackendHandle, step: FlowStep) -> StepResult:
        if step.service not in self.procs:
            raise BackendError(f"step {step.name!r}: service {step.service!r} not booted")
        svc = self._scenario.service(step.service)
        proc = subprocess.Popen(step.command, shell=True, cwd=self.workdir, env=self._env(svc),
                                stdin=subprocess.DEVNULL, stdout=subprocess.PIPE, stderr=subprocess.STDOUT,
                                start_new_session=True)
        # the step's processes count towards the service it runs in
        self._add_instance(step.service, proc.pid)
        try:
            out, _ = proc.communicate(timeout=step.timeout / 1e6)
        except subprocess.TimeoutExpired:
            _killpg(proc.pid, signal.SIGKILL)
            out, _ = proc.communicate()
            raise StepTimeout(step.name, step.timeout, _clip(out.decode("utf-8", "replace"))) from None
        finally:
            self._drop_instance(step.service, proc.pid)
            _killpg(proc.pid, signal.SIGKILL)  # stragglers the step left in the background
        text = _clip(out.decode("utf-8", "replace"))
        if proc.returncode != 0:
            raise StepFailure(step.name, proc.returncode, text)
        return StepResult(step.name, proc.returncode, text)

    def run_processes(self) -> list[int]:
        """Live (non-zombie) processes whose session was started by this backend."""
        sessions = {pid for _, pid in self._instance_lines} | {p.pid for p in self.procs.values()}
        return [pid for pid, sid in _session_members() if sid in sessions]

    def teardown(self, h: BackendHandle | None = None) -> TeardownReport:
        if self._torn_down:
            return TeardownReport(noop=True)
        report = TeardownReport()
        for name, proc in self.procs.items():
            if proc.poll() is not None:
                report.already_gone.append(name)
            _killpg(proc.pid, signal.SIGTERM)
        deadline = time.monotonic() + TERM_GRACE_S
        while self.run_processes() and time.monotonic() < deadline:
            time.sleep(0.02)
        for pid in self.run_processes():
            _kill(pid, signal.SIGKILL)
        for proc in self.procs.values():
            _killpg(proc.pid, signal.SIGKILL)
            try:
                proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                pass
        deadline = time.monotonic() + 2.0
        while self.run_processes() and time.monotonic() < deadline:
            time.sleep(0.02)
        survivors = self.run_processes()
        if survivors:
            raise TeardownIncomplete([f"pid {p}" for p in survivors])
        report.removed = [n for n in self.procs if n not in report.already_gone]
        if self.log_dir and os.path.isdir(self.workdir):
            os.makedirs(self.log_dir, exist_ok=True)
            for name, path in self._logs.items():
                if os.path.exists(path):
                    shutil.copyfile(path, os.path.join(self.log_dir, f"{name}.log"))
        shutil.rmtree(self.workdir, ignore_errors=True)
        report.removed.append(f"workdir {self.workdir}")
        self._instance_lines = []
        self._write_instances()
        self._torn_down = True
        return report


def _kill(pid: int, sig: int) -> None:
    try:
        os.kill(pid, sig)
    except (ProcessLookupError, PermissionError):
        pass


def _killpg(pgid: int, sig: int) -> None:
    try:
        os.killpg(pgid, sig)
    except (ProcessLookupError, PermissionError):
        pass


def _session_members(proc_dir: str = "/proc") -> list[tuple[int, int]]:
    """(pid, session id) of every live, non-zombie process."""
    out = []
    for entry in os.listdir(proc_dir):
        if not entry.isdigit():
            continue
        try:
            with open(f"{proc_dir}/{entry}/stat", "rb") as fh:
                raw = fh.read()
        except OSError:
            continue
        f = raw[raw.rfind(b")") + 2:].split()
        if len(f) > 3 and f[0] not in (b"Z", b"X"):
            out.append((int(entry), int(f[3])))
    return out


class ContainerBackend(_Base):
    """Drives an OCI engine through its CLI (docker-compatible subcommands)."""

    kind = "container"

    def __init__(self, workdir: str, engine: str = "docker", **kw):
        super().__init__(workdir, **kw)
        self.engine = engine
        if not shutil.which(engine):
            raise EngineUnavailable(f"container engine CLI {engine!r} not found on PATH")
        self.containers: dict[str, str] = {}
        self.created_images: list[str] = []
        self.created_containers: list[str] = []

    def _cli(self, *args: str, timeout: float | None = None, check: bool = True) -> subprocess.CompletedProcess:
        try:
            res = subprocess.run([self.engine, *args], capture_output=True, text=True, timeout=timeout)
        except FileNotFoundError as exc:
            raise EngineUnavailable(str(exc)) from None
        if check and res.returncode != 0:
            raise BackendError(f"{self.engine} {' '.join(args[:2])} failed ({res.returncode}): "
                               f"{res.stderr.strip()[:500]}")
        return res

    def _image_present(self, ref: str) -> bool:
        return self._cli("image", "inspect", ref, check=False).returncode == 0

    def install(self, s: UsageScenario) -> list[int]:
        os.makedirs(self.workdir, exist_ok=True)
        statuses = []
        for svc in s.services:
            ref = svc.image_or_command
            present = self._image_present(ref)
            for cmd in svc.build_steps:
                res = subprocess.run(cmd, shell=True, cwd=self.workdir, stdout=subprocess.PIPE,
                                     stderr=subprocess.STDOUT)
                statuses.append(res.returncode)
                if res.returncode != 0:
                    raise BuildFailure(svc.name, cmd, res.returncode, _clip(res.stdout.decode("utf-8", "replace")))
            if not present and not svc.build_steps:
                res = self._cli("pull", ref, check=False)
                statuses.append(res.returncode)
                if res.returncode != 0:
                    raise BuildFailure(svc.name, f"{self.engine} pull {ref}", res.returncode, res.stderr)
            if not present and self._image_present(ref):
                self.created_images.append(ref)
        return statuses

    def boot(self, s: UsageScenario) -> BackendHandle:
        self.handle = BackendHandle(self.kind, {}, self.workdir)
        for svc in s.services:
            args = ["create", "--label", f"{CONTAINER_LABEL}={self.run_id}",
                    "--name", f"gmt-{self.run_id}-{svc.name}"[:128]]
            for k, v in sorted(svc.env.items()):
                args += ["-e", f"{k}={v}"]
            if svc.cpu_limit:
                args += ["--cpus", f"{svc.cpu_limit:g}"]
            if svc.mem_limit:
                args += ["--memory", str(svc.mem_limit)]
            cid = self._cli(*args, svc.image_or_command).stdout.strip().splitlines()[-1]
            self.containers[svc.name] = cid
            self.created_containers.append(cid)
            self.handle.instances[svc.name] = cid
            self._cli("start", cid)
            pid = self._cli("inspect", "-f", "{{.State.Pid}}", cid).stdout.strip()
            if pid.isdigit() and int(pid) > 0:
                self._add_instance(svc.name, int(pid))
            self._wait_probe(svc, self._checker(svc, cid), lambda c=cid: self._running(c))
        return self.handle

    def _running(self, cid: str) -> bool:
        res = self._cli("inspect", "-f", "{{.State.Running}}", cid, check=False)
        return res.returncode == 0 and res.stdout.strip() == "true"

    def _checker(self, svc: ServiceSpec, cid: str):
        probe = svc.boot_ready
        if probe.kind == "log-pattern":
            pattern = re.compile(str(probe.value))

            def check():
                res = self._cli("logs", cid, check=False)
                return pattern.search(res.stdout + res.stderr) is not None
            return check
        if probe.kind == "port-open":
            host, port = _parse_port(probe.value)
            if host == "127.0.0.1":
                ip = self._cli("inspect", "-f", "{{range .NetworkSettings.Networks}}{{.IPAddress}} {{end}}",
                               cid, check=False).stdout.split()
                host = ip[0] if ip else host
            return lambda: _port_open(host, port)
        return lambda: True

    def exec_step(self, h: BackendHandle, step: FlowStep) -> StepResult:
        cid = self.containers.get(step.service)
        if cid is None:
            raise BackendError(f"step {step.name!r}: service {step.service!r} not booted")
        try:
            res = subprocess.run([self.engine, "exec", cid, "sh", "-c", step.command], capture_output=True,
                                 text=True, timeout=step.timeout / 1e6)
        except subprocess.TimeoutExpired as exc:
            out = exc.stdout.decode() if isinstance(exc.stdout, bytes) else (exc.stdout or "")
            raise StepTimeout(step.name, step.timeout, _clip(out)) from None
        text = _clip(res.stdout + res.stderr)
        if res.returncode != 0:
            raise StepFailure(step.name, res.returncode, text)
        return StepResult(step.name, res.returncode, text)

    def teardown(self, h: BackendHandle | None = None) -> TeardownReport:
        if self._torn_down:
            return TeardownReport(noop=True)
        report = TeardownReport()
        survivors = []
        for cid in self.created_containers:
            self._cli("stop", "-t", "5", cid, check=False)
            res = self._cli("rm", "-f", cid, check=False)
            if res.returncode == 0:
                report.removed.append(f"container {cid}")
            elif "no such container" in (res.stderr or "").lower():
                report.already_gone.append(f"container {cid}")
            else:
                survivors.append(f"container {cid}")
        for ref in self.created_images:
            res = self._cli("rmi", ref, check=False)
            if res.returncode == 0:
                report.removed.append(f"image {ref}")
            elif "no such image" in (res.stderr or "").lower():
                report.already_gone.append(f"image {ref}")
            else:
                survivors.append(f"image {ref}")
        self._instance_lines = []
        self._write_instances()
        shutil.rmtree(self.workdir, ignore_errors=True)
        if survivors:
            # a later retry may succeed, so only finished work is forgotten
            self.created_containers = [c for c in self.created_containers if f"container {c}" in survivors]
            self.created_images = [i for i in self.created_images if f"image {i}" in survivors]
            raise TeardownIncomplete(survivors)
        self._torn_down = True
        return report


def make_backend(kind: str, workdir: str, **kw):
    if kind == "process":
        return ProcessBackend(workdir, **kw)
    if kind == "container":
        return ContainerBackend(workdir, **kw)
    raise ValueError(f"unknown backend {kind!r}")
