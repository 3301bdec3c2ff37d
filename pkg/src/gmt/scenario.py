"""Usage-scenario documents: what to deploy and how to exercise it.

A scenario is a single YAML document (``*.gmt.yml``) restricted to plain
mappings, sequences and scalars. Unknown keys are rejected so that two
runs of the same file always mean the same thing. See ``docs/scenario.md``.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Any

import yaml

__all__ = [
    "ReadinessProbe",
    "ServiceSpec",
    "FlowStep",
    "UsageScenario",
    "LocatedError",
    "ScenarioError",
    "ScenarioSyntaxError",
    "SchemaError",
    "SemanticError",
    "parse_scenario",
    "load_scenario",
    "serialize_scenario",
    "scenario_to_dict",
    "scenario_digest",
]

DEFAULT_SAMPLING_INTERVAL_US = 100_000
MIN_SAMPLING_INTERVAL_US = 10_000
MAX_SAMPLING_INTERVAL_US = 10_000_000
DEFAULT_STEP_TIMEOUT_US = 60_000_000
DEFAULT_PROBE_TIMEOUT_US = 60_000_000

PROBE_KINDS = ("port-open", "log-pattern", "fixed-delay")
_NAME_RE = re.compile(r"^[a-zA-Z0-9_-]{1,64}$")


@dataclass(frozen=True)
class ReadinessProbe:
    kind: str
    value: int | str
    timeout: int = DEFAULT_PROBE_TIMEOUT_US


@dataclass(frozen=True)
class ServiceSpec:
    name: str
    image_or_command: str
    boot_ready: ReadinessProbe
    env: dict[str, str] = field(default_factory=dict)
    cpu_limit: float | None = None
    mem_limit: int | None = None
    build_steps: tuple[str, ...] = ()


@dataclass(frozen=True)
class FlowStep:
    name: str
    service: str
    command: str
    timeout: int = DEFAULT_STEP_TIMEOUT_US


@dataclass(frozen=True)
class UsageScenario:
    name: str
    services: tuple[ServiceSpec, ...]
    flow: tuple[FlowStep, ...]
    sampling_interval: int = DEFAULT_SAMPLING_INTERVAL_US
    # empty means "every reporter available on the host"
    reporters: tuple[str, ...] = ()
    metadata: dict[str, str] = field(default_factory=dict)

    def service(self, name: str) -> ServiceSpec:
        for svc in self.services:
            if svc.name == name:
                return svc
        raise KeyError(name)


@dataclass(frozen=True)
class LocatedError:
    line: int | None
    field: str
    message: str

    def __str__(self) -> str:
        where = f"line {self.line}" if self.line is not None else "document"
        return f"{where}: {self.field}: {self.message}"


class ScenarioError(ValueError):
    def __init__(self, errors: list[LocatedError]):
        self.errors = list(errors)
        super().__init__("; ".join(str(e) for e in self.errors))


class ScenarioSyntaxError(ScenarioError):
    pass


class SchemaError(ScenarioError):
    pass


class SemanticError(ScenarioError):
    pass


# -- node walking ------------------------------------------------------------

_TOP_KEYS = {"name", "services", "flow", "sampling_interval", "reporters", "metadata"}
_SERVICE_KEYS = {"name", "image_or_command", "env", "cpu_limit", "mem_limit",
                 "build_steps", "boot_ready"}
_STEP_KEYS = {"name", "service", "command", "timeout"}
_PROBE_KEYS = {"port_open", "log_pattern", "fixed_delay", "timeout"}


def _line(node: yaml.Node) -> int:
    return node.start_mark.line + 1


class _Walker:
    """Converts a composed YAML node tree to plain values, collecting errors."""

    def __init__(self) -> None:
        self.errors: list[LocatedError] = []

    def fail(self, node: yaml.Node | None, path: str, msg: str) -> None:
        self.errors.append(LocatedError(_line(node) if node is not None else None, path, msg))

    def mapping(self, node: yaml.Node, path: str, allowed: set[str]) -> dict[str, yaml.Node]:
        if not isinstance(node, yaml.MappingNode):
            self.fail(node, path, "expected a mapping")
            return {}
        out: dict[str, yaml.Node] = {}
        for knode, vnode in node.value:
            if not isinstance(knode, yaml.ScalarNode):
                self.fail(knode, path, "keys must be plain strings")
                continue
            key = knode.value
            if key not in allowed:
                self.fail(knode, f"{path}.{key}" if path else key, "unknown key")
                continue
            if key in out:
                self.fail(knode, f"{path}.{key}" if path else key, "duplicate key")
                continue
            out[key] = vnode
        return out

    def scalar(self, node: yaml.Node, path: str, kind: type | tuple[type, ...]) -> Any:
        if not isinstance(node, yaml.ScalarNode):
            self.fail(node, path, f"expected {_kind_name(kind)}")
            return None
        value = yaml.safe_load(yaml.serialize(node))
        if isinstance(value, bool) and bool not in _as_tuple(kind):
            self.fail(node, path, f"expected {_kind_name(kind)}, got boolean")
            return None
        if kind is float or (isinstance(kind, tuple) and float in kind):
            if isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
        if not isinstance(value, kind):
            self.fail(node, path, f"expected {_kind_name(kind)}, got {type(value).__name__}")
            return None
        return value

    def sequence(self, node: yaml.Node, path: str) -> list[yaml.Node]:
        if not isinstance(node, yaml.SequenceNode):
            self.fail(node, path, "expected a list")
            return []
        return list(node.value)

    def str_map(self, node: yaml.Node, path: str) -> dict[str, str]:
        if not isinstance(node, yaml.MappingNode):
            self.fail(node, path, "expected a mapping")
            return {}
        out = {}
        for knode, vnode in node.value:
            key = self.scalar(knode, path, str)
            if key is None:
                continue
            value = self.scalar(vnode, f"{path}.{key}", (str, int, float))
            if value is not None:
                out[key] = str(value) if not isinstance(value, str) else value
        return out


def _as_tuple(kind: type | tuple[type, ...]) -> tuple[type, ...]:
    return kind if isinstance(kind, tuple) else (kind,)


def _kind_name(kind: type | tuple[type, ...]) -> str:
    names = {str: "string", int: "integer", float: "number", bool: "boolean"}
    return " or ".join(names.get(k, k.__name__) for k in _as_tuple(kind))


def _parse_probe(w: _Walker, node: yaml.Node, path: str) -> tuple[ReadinessProbe | None, list[LocatedError]]:
    """Accepts ``"fixed-delay 1000000"`` shorthand or a one-variant mapping."""
    semantic: list[LocatedError] = []
    if isinstance(node, yaml.ScalarNode):
        text = w.scalar(node, path, str)
        if text is None:
            return None, semantic
        kind, _, arg = text.strip().partition(" ")
        arg = arg.strip()
        if kind not in PROBE_KINDS or not arg:
            w.fail(node, path, f"expected '<{'|'.join(PROBE_KINDS)}> <argument>'")
            return None, semantic
        if kind == "log-pattern":
            return ReadinessProbe(kind, arg), semantic
        try:
            value = int(arg.replace("_", ""))
        except ValueError:
            w.fail(node, path, f"{kind} argument must be an integer")
            return None, semantic
        return _check_probe(ReadinessProbe(kind, value), node, path, semantic), semantic

    raw = w.mapping(node, path, _PROBE_KEYS)
    variants = [k for k in ("port_open", "log_pattern", "fixed_delay") if k in raw]
    if len(variants) != 1:
        semantic.append(LocatedError(_line(node), path,
                                     f"exactly one readiness probe variant must be set, found {len(variants)}"))
        return None, semantic
    key = variants[0]
    kind = key.replace("_", "-")
    value = w.scalar(raw[key], f"{path}.{key}", str if kind == "log-pattern" else int)
    timeout = DEFAULT_PROBE_TIMEOUT_US
    if "timeout" in raw:
        timeout = w.scalar(raw["timeout"], f"{path}.timeout", int)
    if value is None or timeout is None:
        return None, semantic
    return _check_probe(ReadinessProbe(kind, value, timeout), node, path, semantic), semantic


def _check_probe(probe: ReadinessProbe, node: yaml.Node, path: str,
                 semantic: list[LocatedError]) -> ReadinessProbe:
    if probe.kind == "fixed-delay" and probe.value < 0:
        semantic.append(LocatedError(_line(node), path, "fixed-delay must be >= 0"))
    if probe.kind == "port-open" and not 0 < probe.value < 65536:
        semantic.append(LocatedError(_line(node), path, "port must be in 1..65535"))
    if probe.timeout <= 0:
        semantic.append(LocatedError(_line(node), path, "probe timeout must be > 0"))
    return probe


def parse_scenario(text: str | bytes) -> UsageScenario:
    """Parse and validate a scenario document.

    Raises ScenarioSyntaxError, SchemaError or SemanticError; each carries
    ``errors``, a list of LocatedError with 1-based line numbers.
    """
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ScenarioSyntaxError([LocatedError(None, "", f"not UTF-8: {exc}")]) from None
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ScenarioSyntaxError([LocatedError(line, "", str(getattr(exc, "problem", exc)))]) from None
    if root is None:
        raise SchemaError([LocatedError(None, "", "empty document")])

    w = _Walker()
    semantic: list[LocatedError] = []
    top = w.mapping(root, "", _TOP_KEYS)
    for required in ("name", "services", "flow"):
        if required not in top and isinstance(root, yaml.MappingNode):
            w.fail(root, required, "missing required key")

    name = w.scalar(top["name"], "name", str) if "name" in top else None
    if name is not None and not _NAME_RE.match(name):
        semantic.append(LocatedError(_line(top["name"]), "name",
                                     f"{name!r} must match [a-zA-Z0-9_-]{{1,64}}"))

    interval = DEFAULT_SAMPLING_INTERVAL_US
    if "sampling_interval" in top:
        node = top["sampling_interval"]
        interval = w.scalar(node, "sampling_interval", int)
        if interval is not None:
            if interval < MIN_SAMPLING_INTERVAL_US:
                semantic.append(LocatedError(_line(node), "sampling_interval",
                                             f"{interval} below minimum {MIN_SAMPLING_INTERVAL_US}"))
            elif interval > MAX_SAMPLING_INTERVAL_US:
                semantic.append(LocatedError(_line(node), "sampling_interval",
                                             f"{interval} above maximum {MAX_SAMPLING_INTERVAL_US}"))

    reporters: list[str] = []
    if "reporters" in top:
        for i, rnode in enumerate(w.sequence(top["reporters"], "reporters")):
            rid = w.scalar(rnode, f"reporters[{i}]", str)
            if rid is not None:
                if rid in reporters:
                    semantic.append(LocatedError(_line(rnode), f"reporters[{i}]", f"duplicate reporter {rid!r}"))
                reporters.append(rid)

    metadata = w.str_map(top["metadata"], "metadata") if "metadata" in top else {}

    services: list[ServiceSpec] = []
    seen_services: set[str] = set()
    for i, snode in enumerate(w.sequence(top["services"], "services") if "services" in top else []):
        path = f"services[{i}]"
        raw = w.mapping(snode, path, _SERVICE_KEYS)
        for required in ("name", "image_or_command", "boot_ready"):
            if required not in raw and isinstance(snode, yaml.MappingNode):
                w.fail(snode, f"{path}.{required}", "missing required key")
        sname = w.scalar(raw["name"], f"{path}.name", str) if "name" in raw else None
        if sname is not None:
            if not _NAME_RE.match(sname):
                semantic.append(LocatedError(_line(raw["name"]), f"{path}.name", f"invalid service name {sname!r}"))
            if sname in seen_services:
                semantic.append(LocatedError(_line(raw["name"]), f"{path}.name", f"duplicate service name {sname!r}"))
            seen_services.add(sname)
        image = w.scalar(raw["image_or_command"], f"{path}.image_or_command", str) if "image_or_command" in raw else None
        if image is not None and not image.strip():
            semantic.append(LocatedError(_line(raw["image_or_command"]), f"{path}.image_or_command", "must be non-empty"))
        env = w.str_map(raw["env"], f"{path}.env") if "env" in raw else {}
        cpu_limit = None
        if "cpu_limit" in raw:
            cpu_limit = w.scalar(raw["cpu_limit"], f"{path}.cpu_limit", float)
            if cpu_limit is not None and not 0 < cpu_limit <= 1024:
                semantic.append(LocatedError(_line(raw["cpu_limit"]), f"{path}.cpu_limit", "must be in (0, 1024]"))
        mem_limit = None
        if "mem_limit" in raw:
            mem_limit = w.scalar(raw["mem_limit"], f"{path}.mem_limit", int)
            if mem_limit is not None and mem_limit <= 0:
                semantic.append(LocatedError(_line(raw["mem_limit"]), f"{path}.mem_limit", "must be > 0"))
        build_steps: list[str] = []
        if "build_steps" in raw:
            for j, bnode in enumerate(w.sequence(raw["build_steps"], f"{path}.build_steps")):
                cmd = w.scalar(bnode, f"{path}.build_steps[{j}]", str)
                if cmd is not None:
                    build_steps.append(cmd)
        probe = None
        if "boot_ready" in raw:
            probe, probe_errors = _parse_probe(w, raw["boot_ready"], f"{path}.boot_ready")
            semantic.extend(probe_errors)
        if sname is not None and image is not None and probe is not None:
            services.append(ServiceSpec(sname, image, probe, env, cpu_limit, mem_limit, tuple(build_steps)))

    flow: list[FlowStep] = []
    seen_steps: set[str] = set()
    for i, fnode in enumerate(w.sequence(top["flow"], "flow") if "flow" in top else []):
        path = f"flow[{i}]"
        raw = w.mapping(fnode, path, _STEP_KEYS)
        for required in ("name", "service", "command"):
            if required not in raw and isinstance(fnode, yaml.MappingNode):
                w.fail(fnode, f"{path}.{required}", "missing required key")
        step_name = w.scalar(raw["name"], f"{path}.name", str) if "name" in raw else None
        if step_name is not None:
            if not _NAME_RE.match(step_name):
                semantic.append(LocatedError(_line(raw["name"]), f"{path}.name", f"invalid step name {step_name!r}"))
            if step_name in seen_steps:
                semantic.append(LocatedError(_line(raw["name"]), f"{path}.name", f"duplicate step name {step_name!r}"))
            seen_steps.add(step_name)
        service = w.scalar(raw["service"], f"{path}.service", str) if "service" in raw else None
        command = w.scalar(raw["command"], f"{path}.command", str) if "command" in raw else None
        timeout = DEFAULT_STEP_TIMEOUT_US
        if "timeout" in raw:
            timeout = w.scalar(raw["timeout"], f"{path}.timeout", int)
            if timeout is not None and timeout <= 0:
                semantic.append(LocatedError(_line(raw["timeout"]), f"{path}.timeout", "must be > 0"))
        if step_name is not None and service is not None and command is not None and timeout is not None:
            flow.append(FlowStep(step_name, service, command, timeout))
            if service not in seen_services:
                semantic.append(LocatedError(_line(raw["service"]), f"{path}.service",
                                             f"step {step_name!r} references unknown service {service!r}"))

    if w.errors:
        raise SchemaError(w.errors)
    if semantic:
        raise SemanticError(semantic)
    if interval is None:  # pragma: no cover - reported as schema error above
        raise SchemaError([LocatedError(None, "sampling_interval", "invalid")])
    return UsageScenario(name, tuple(services), tuple(flow), interval, tuple(reporters), metadata)


def load_scenario(path: str) -> UsageScenario:
    with open(path, "rb") as fh:
        return parse_scenario(fh.read())


def _probe_to_dict(probe: ReadinessProbe) -> dict[str, Any]:
    return {probe.kind.replace("-", "_"): probe.value, "timeout": probe.timeout}


def scenario_to_dict(s: UsageScenario) -> dict[str, Any]:
    """Canonical, fully default-filled plain-data form."""
    services = []
    for svc in s.services:
        d: dict[str, Any] = {
            "name": svc.name,
            "image_or_command": svc.image_or_command,
            "env": dict(sorted(svc.env.items())),
            "build_steps": list(svc.build_steps),
            "boot_ready": _probe_to_dict(svc.boot_ready),
        }
        if svc.cpu_limit is not None:
            d["cpu_limit"] = svc.cpu_limit
        if svc.mem_limit is not None:
            d["mem_limit"] = svc.mem_limit
        services.append(d)
    return {
        "name": s.name,
        "sampling_interval": s.sampling_interval,
        "reporters": list(s.reporters),
        "metadata": dict(sorted(s.metadata.items())),
        "services": services,
        "flow": [{"name": f.name, "service": f.service, "command": f.command, "timeout": f.timeout}
                 for f in s.flow],
    }


def serialize_scenario(s: UsageScenario) -> str:
    # non-ASCII is escaped: PyYAML's emitter folds a raw U+0085 inside quoted scalars
    return yaml.safe_dump(scenario_to_dict(s), sort_keys=True, allow_unicode=False)


def scenario_digest(s: UsageScenario) -> str:
    canonical = json.dumps(scenario_to_dict(s), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
