"""Improvement suggestions for annotated code segments from a chat-completion model.

Runs strictly after measurement. Without explicit configuration the built-in
offline stub answers, so nothing leaves the machine.
"""
from __future__ import annotations

import hashlib
import json
import os
import re
import socket
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Callable, Iterable, Mapping, Sequence

from .analysis import Finding

MODES = ("improve", "rate")
TRUNCATED = "[truncated]"
DEFAULT_MAX_PROMPT_CHARS = 12_000

_PREAMBLE = ("You are a software performance engineer. The code below ran under a resource "
             "measurement harness; the measured evidence is listed first.")
_INSTRUCTIONS = {
    "improve": "Rewrite the code to reduce the flagged resource usage and explain the change.",
    "rate": ("Reply with a first line `RATING: <1-10>` (10 = most resource efficient), "
             "then list concrete suggestions."),
}


class AdvisorError(Exception):
    pass


class ProviderUnreachable(AdvisorError):
    pass


class ProviderRejected(AdvisorError):
    def __init__(self, status: int, body: str):
        self.status = status
        self.body = body
        super().__init__(f"provider rejected the request with status {status}: {body[:200]}")


class Timeout(AdvisorError):
    pass


@dataclass(frozen=True)
class CodeSegment:
    source_path: str
    line_range: tuple[int, int]
    text: str
    linked_finding: Finding | None = None

    def __post_init__(self):
        start, end = self.line_range
        if start < 1 or end < start:
            raise ValueError(f"bad line range {self.line_range}")
        if not self.text:
            raise ValueError("segment text is empty")

    def to_dict(self) -> dict:
        return {"source_path": self.source_path, "line_range": list(self.line_range), "text": self.text,
                "linked_finding": self.linked_finding.to_dict() if self.linked_finding else None}

    @classmethod
    def from_dict(cls, d: Mapping) -> "CodeSegment":
        lf = d.get("linked_finding")
        return cls(d["source_path"], tuple(d["line_range"]), d["text"], Finding.from_dict(lf) if lf else None)


@dataclass(frozen=True)
class Recommendation:
    segment: CodeSegment
    mode: str
    prompt: str
    response: str
    rating: int | None
    provider_id: str
    created_at: str
    step: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"bad mode {self.mode!r}")
        if self.rating is not None and (self.mode != "rate" or not 1 <= self.rating <= 10):
            raise ValueError("rating only in rate mode, within 1..10")

    def to_dict(self) -> dict:
        return {"segment": self.segment.to_dict(), "mode": self.mode, "prompt": self.prompt,
                "response": self.response, "rating": self.rating, "provider_id": self.provider_id,
                "created_at": self.created_at, "step": self.step}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Recommendation":
        return cls(CodeSegment.from_dict(d["segment"]), d["mode"], d["prompt"], d["response"], d.get("rating"),
                   d["provider_id"], d["created_at"], d.get("step"))


def _num(x) -> str:
    if x is None:
        return "n/a"
    x = float(x)
    return f"{x:.0f}" if x.is_integer() else f"{x:.3f}"


def _evidence_lines(findings: Sequence[Finding], step_stats: Sequence | None) -> list[str]:
    lines = []
    for f in findings:
        lines.append(f"- [{f.rule_id} {f.severity}] {f.phase} {f.metric_id}"
                     + (f" ({f.instance})" if f.instance else "")
                     + f": observed {_num(f.observed)} {f.unit}, threshold {_num(f.threshold)} {f.unit}")
    for s in step_stats or ():
        if s.value is None:
            continue
        where = s.detail or s.scope
        lines.append(f"- step {s.sub} {s.metric_id} [{where}]: {_num(s.value)} {s.unit}"
                     f" over {_num(s.duration)} µs")
    return lines or ["- none"]


def build_prompt(segment: CodeSegment, findings: Sequence[Finding], mode: str, *,
                 step_stats: Sequence | None = None, max_prompt_chars: int = DEFAULT_MAX_PROMPT_CHARS) -> str:
    """Deterministic prompt; never longer than ``max_prompt_chars``.

    Oversized code is cut at a line boundary and marked ``[truncated]``
    inside the code block. Evidence lines are dropped from the end if even
    an empty code block does not fit.
    """
    if mode not in MODES:
        raise ValueError(f"bad mode {mode!r}")
    start, end = segment.line_range
    head = f"{_PREAMBLE}\n\nMeasured evidence:\n"
    code_head = f"\n\nCode from {segment.source_path}, lines {start}-{end}:\n```\n"
    tail = f"```\n\n{_INSTRUCTIONS[mode]}\n"
    evidence = _evidence_lines(findings, step_stats)
    code = segment.text if segment.text.endswith("\n") else segment.text + "\n"

    def assemble(ev, body):
        return head + "\n".join(ev) + code_head + body + tail

    prompt = assemble(evidence, code)
    if len(prompt) <= max_prompt_chars:
        return prompt
    marker = TRUNCATED + "\n"
    kept_ev = list(evidence)

    def shown():
        omitted = len(evidence) - len(kept_ev)
        return kept_ev + [f"- ... {omitted} more omitted"] if omitted else kept_ev

    while len(assemble(shown(), marker)) > max_prompt_chars:
        if not kept_ev:
            raise ValueError(f"max_prompt_chars {max_prompt_chars} too small for the prompt template")
        kept_ev.pop()
    ev = shown()
    room = max_prompt_chars - len(assemble(ev, marker))
    kept = []
    used = 0
    for line in code.splitlines(keepends=True):
        if used + len(line) > room:
            break
        kept.append(line)
        used += len(line)
    return assemble(ev, "".join(kept) + marker)


_RATING = re.compile(r"^\s*RATING:\s*(\d+)\s*$")


def parse_rating(response: str) -> int | None:
    """First ``RATING: <n>`` line; None when absent or n outside 1..10."""
    for line in response.splitlines():
        m = _RATING.match(line)
        if m:
            n = int(m.group(1))
            return n if 1 <= n <= 10 else None
    return None


# -- providers ------------------------------------------------------------------

class StubProvider:
    """Offline provider: the answer is a pure function of the prompt."""

    def __init__(self, config: Mapping | None = None):
        self.provider_id = "stub"

    def send(self, prompt: str) -> str:
        digest = hashlib.sha256(prompt.encode("utf-8")).hexdigest()
        out = f"STUB-RESPONSE {digest[:12]}"
        if "RATING: <1-10>" in prompt:
            out = f"RATING: {int(digest[:8], 16) % 10 + 1}\n" + out
        return out


class HttpChatProvider:
    """Chat-completion endpoint speaking the common ``messages``/``choices`` JSON shape."""

    def __init__(self, config: Mapping):
        try:
            self.endpoint = config["endpoint"]
            self.model = config["model"]
        except KeyError as exc:
            raise ValueError(f"provider config needs {exc.args[0]!r}") from None
        self.token_env = config.get("token_env")
        self.timeout_s = float(config.get("timeout_ms", 60_000)) / 1000.0
        self.retries = int(config.get("retries", 1))
        self.provider_id = config.get("id") or f"http:{self.model}"
        self._open = config.get("_opener") or urllib.request.urlopen

    def _request(self, prompt: str) -> urllib.request.Request:
        body = json.dumps({"model": self.model, "messages": [{"role": "user", "content": prompt}]}).encode()
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env) if self.token_env else None
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")

    def send(self, prompt: str) -> str:
        last: Exception | None = None
        for _attempt in range(self.retries + 1):
            try:
                with self._open(self._request(prompt), timeout=self.timeout_s) as resp:
                    doc = json.loads(resp.read().decode("utf-8"))
                return doc["choices"][0]["message"]["content"]
            except urllib.error.HTTPError as exc:
                body = exc.read().decode("utf-8", "replace") if exc.fp else ""
                if 400 <= exc.code < 500:
                    raise ProviderRejected(exc.code, body) from None
                last = ProviderUnreachable(f"server error {exc.code}: {body[:200]}")
            except (socket.timeout, TimeoutError) as exc:
                last = Timeout(f"no answer within {self.timeout_s:g}s")
            except urllib.error.URLError as exc:
                if isinstance(exc.reason, (socket.timeout, TimeoutError)):
                    last = Timeout(f"no answer within {self.timeout_s:g}s")
                else:
                    last = ProviderUnreachable(str(exc.reason))
            except (ConnectionError, OSError) as exc:
                last = ProviderUnreachable(str(exc))
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise ProviderRejected(200, f"unexpected response shape: {exc}") from None
        raise last


PROVIDERS: dict[str, Callable[[Mapping], object]] = {
    "stub": StubProvider,
    "http": HttpChatProvider,
}


def make_provider(config: Mapping | None = None):
    kind = (config or {}).get("provider", "stub")
    try:
        return PROVIDERS[kind](config or {})
    except KeyError:
        raise ValueError(f"unknown provider {kind!r}") from None


def request_recommendation(prompt: str, provider_config: Mapping | None = None) -> str:
    return make_provider(provider_config).send(prompt)


def load_provider_config(path: str) -> dict:
    """YAML/JSON provider file: provider, endpoint, model, token_env, timeout_ms, max_prompt_chars."""
    import yaml

    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: expected a mapping")
    for key in ("token", "api_key"):
        if key in doc:
            raise ValueError(f"{path}: put the token in an environment variable and name it in token_env")
    return doc


@dataclass(frozen=True)
class Annotation:
    step: str
    source_path: str
    start: int
    end: int


def load_annotations(path: str) -> list[Annotation]:
    """Rows of (flow step, source_path, start, end). Relative paths resolve against the file's directory."""
    import yaml

    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or []
    if isinstance(doc, dict):
        doc = doc.get("segments", [])
    base = os.path.dirname(os.path.abspath(path))
    out = []
    for i, row in enumerate(doc):
        try:
            src = row["source_path"]
            out.append(Annotation(str(row["step"]), src if os.path.isabs(src) else os.path.join(base, src),
                                  int(row["start"]), int(row["end"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}: annotation {i}: {exc}") from None
    return out


def read_segment(ann: Annotation, linked: Finding | None = None, display_path: str | None = None) -> CodeSegment:
    with open(ann.source_path, encoding="utf-8", errors="replace") as fh:
        lines = fh.read().splitlines(keepends=True)
    if ann.end > len(lines):
        raise ValueError(f"{ann.source_path} has {len(lines)} lines, annotation wants {ann.start}-{ann.end}")
    return CodeSegment(display_path or ann.source_path, (ann.start, ann.end),
                       "".join(lines[ann.start - 1:ann.end]), linked)


def advise(findings: Sequence[Finding], annotations: Iterable[Annotation], *, mode: str = "improve",
           provider_config: Mapping | None = None, stats: Sequence | None = None,
           now: Callable[[], str] | None = None) -> list[Recommendation]:
    """One recommendation per annotated segment, when the run has something flagged.

    Evidence is every warn/critical finding plus the segment's own step stats.
    Annotations are processed in order; requests are sequential.
    """
    flagged = [f for f in findings if f.severity != "info"]
    if not flagged:
        return []
    provider = make_provider(provider_config)
    budget = int((provider_config or {}).get("max_prompt_chars", DEFAULT_MAX_PROMPT_CHARS))
    now = now or (lambda: datetime.now(timezone.utc).isoformat(timespec="seconds"))
    out = []
    for ann in annotations:
        display = os.path.basename(ann.source_path)
        segment = read_segment(ann, flagged[0], display)
        step_stats = [s for s in stats or () if s.sub == ann.step]
        prompt = build_prompt(segment, flagged, mode, step_stats=step_stats, max_prompt_chars=budget)
        response = provider.send(prompt)
        rating = parse_rating(response) if mode == "rate" else None
        out.append(Recommendation(segment, mode, prompt, response, rating, provider.provider_id, now(), ann.step))
    return out
