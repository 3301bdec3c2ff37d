"""Directory-per-run JSON store.

Layout::

    <store>/index.json          list of index rows
    <store>/<run_id>/run.json   canonical run document
    <store>/<run_id>/raw/       reporter sample files

Every document is written to a temp file and renamed into place, so a
reader never sees a partial file. Single writer, many readers.
"""
from __future__ import annotations

import json
import os
import secrets
import tempfile
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Iterable, Mapping

from .advisor import Recommendation
from .analysis import Finding
from .metrics import PHASES, PhaseMarker, PhaseStats

SCHEMA_VERSION = 1
INDEX = "index.json"
RUN_DOC = "run.json"
STATUSES = ("completed", "aborted")


class StorageError(Exception):
    pass


class DuplicateId(StorageError):
    pass


class NotFound(StorageError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "not found"


class SchemaVersionError(StorageError):
    pass


def canonical_json(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def atomic_write_json(path: str, doc: Any) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", suffix=".json", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(canonical_json(doc))
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def new_run_id(now: datetime | None = None) -> str:
    """Lexicographic order follows creation time; a random suffix breaks ties."""
    now = now or datetime.now(timezone.utc)
    return now.strftime("%Y%m%dT%H%M%S%fZ") + "-" + secrets.token_hex(3)


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


@dataclass
class RunRecord:
    run_id: str
    scenario_digest: str
    scenario_name: str
    machine_fingerprint: str
    started_at: str
    finished_at: str
    markers: list[PhaseMarker]
    stats: list[PhaseStats]
    findings: list[Finding] = field(default_factory=list)
    recommendations: list[Recommendation] = field(default_factory=list)
    raw_dir: str = "raw"
    status: str = "completed"
    reason: str | None = None
    scenario: dict | None = None
    warnings: list[str] = field(default_factory=list)
    unassigned: dict[str, int] = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def validate(self) -> None:
        if self.status not in STATUSES:
            raise ValueError(f"bad status {self.status!r}")
        if self.status == "aborted" and not self.reason:
            raise ValueError("aborted runs need a reason")
        if self.status == "completed":
            phases = [m.phase for m in self.markers if m.sub is None]
            if phases != list(PHASES):
                raise ValueError(f"completed run needs all six phases in order, got {phases}")

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "run_id": self.run_id,
            "scenario_digest": self.scenario_digest,
            "scenario_name": self.scenario_name,
            "machine_fingerprint": self.machine_fingerprint,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "status": self.status,
            "reason": self.reason,
            "raw_dir": self.raw_dir,
            "markers": [{"phase": m.phase, "start": m.start, "end": m.end, "sub": m.sub} for m in self.markers],
            "stats": [s.to_dict() for s in self.stats],
            "findings": [f.to_dict() for f in self.findings],
            "recommendations": [r.to_dict() for r in self.recommendations],
            "scenario": self.scenario,
            "warnings": list(self.warnings),
            "unassigned": dict(self.unassigned),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunRecord":
        version = d.get("schema_version")
        if not isinstance(version, int) or version > SCHEMA_VERSION:
            raise SchemaVersionError(f"run document schema_version {version!r} is newer than {SCHEMA_VERSION}")
        return cls(
            run_id=d["run_id"],
            scenario_digest=d["scenario_digest"],
            scenario_name=d["scenario_name"],
            machine_fingerprint=d["machine_fingerprint"],
            started_at=d["started_at"],
            finished_at=d["finished_at"],
            markers=[PhaseMarker(m["phase"], m["start"], m["end"], m.get("sub")) for m in d["markers"]],
            stats=[PhaseStats.from_dict(s) for s in d["stats"]],
            findings=[Finding.from_dict(f) for f in d.get("findings", [])],
            recommendations=[Recommendation.from_dict(r) for r in d.get("recommendations", [])],
            raw_dir=d.get("raw_dir", "raw"),
            status=d["status"],
            reason=d.get("reason"),
            scenario=d.get("scenario"),
            warnings=list(d.get("warnings", [])),
            unassigned=dict(d.get("unassigned", {})),
            schema_version=version,
        )

    def index_row(self) -> dict:
        return {"run_id": self.run_id, "scenario_name": self.scenario_name,
                "scenario_digest": self.scenario_digest, "started_at": self.started_at,
                "finished_at": self.finished_at, "status": self.status}


class Store:
    def __init__(self, path: str):
        self.path = os.path.abspath(path)

    def run_dir(self, run_id: str) -> str:
        if not run_id or "/" in run_id or run_id.startswith("."):
            raise NotFound(f"invalid run id {run_id!r}")
        return os.path.join(self.path, run_id)

    def _index_path(self) -> str:
        return os.path.join(self.path, INDEX)

    def read_index(self, retries: int = 3) -> list[dict]:
        path = self._index_path()
        for attempt in range(retries + 1):
            try:
                with open(path, encoding="utf-8") as fh:
                    rows = json.load(fh)
                if not isinstance(rows, list):
                    raise StorageError(f"{path}: index is not a list")
                return rows
            except FileNotFoundError:
                return []
            except json.JSONDecodeError:
                # writers replace atomically, but an editor or copy tool might not
                if attempt == retries:
                    raise StorageError(f"{path}: unreadable index") from None
                time.sleep(0.05)
        return []

    def save_run(self, record: RunRecord) -> str:
        record.validate()
        rid = record.run_id
        run_dir = self.run_dir(rid)
        doc_path = os.path.join(run_dir, RUN_DOC)
        rows = self.read_index()
        if os.path.exists(doc_path) or any(r.get("run_id") == rid for r in rows):
            raise DuplicateId(rid)
        try:
            os.makedirs(run_dir, exist_ok=True)
            atomic_write_json(doc_path, record.to_dict())
        except OSError as exc:
            raise StorageError(f"saving {rid}: {exc}") from exc
        try:
            atomic_write_json(self._index_path(), rows + [record.index_row()])
        except BaseException as exc:
            # keep index and run directories consistent: an unindexed run.json is withdrawn
            try:
                os.unlink(doc_path)
            except OSError:
                pass
            if isinstance(exc, OSError):
                raise StorageError(f"saving {rid}: {exc}") from exc
            raise
        return rid

    def load_run(self, run_id: str) -> RunRecord:
        path = os.path.join(self.run_dir(run_id), RUN_DOC)
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise NotFound(f"run {run_id!r} not found") from None
        except (OSError, json.JSONDecodeError) as exc:
            raise StorageError(f"{path}: {exc}") from exc
        return RunRecord.from_dict(doc)

    def load_document(self, run_id: str) -> dict:
        """Raw run.json (after the schema version check)."""
        return self.load_run(run_id).to_dict()

    def list_runs(self, scenario_name: str | None = None, scenario_digest: str | None = None,
                  since: str | None = None, until: str | None = None) -> list[dict]:
        """Index rows, newest first. ``since``/``until`` compare against started_at (ISO strings)."""
        rows = []
        for r in self.read_index():
            if scenario_name is not None and r.get("scenario_name") != scenario_name:
                continue
            if scenario_digest is not None and r.get("scenario_digest") != scenario_digest:
                continue
            if since is not None and r.get("started_at", "") < since:
                continue
            if until is not None and r.get("started_at", "") > until:
                continue
            rows.append(r)
        rows.sort(key=lambda r: (r.get("started_at", ""), r.get("run_id", "")), reverse=True)
        return rows

    def verify(self) -> list[str]:
        """Problems found; an empty list means the index matches the run directories."""
        problems = []
        try:
            rows = self.read_index()
        except StorageError as exc:
            return [str(exc)]
        ids = [r.get("run_id") for r in rows]
        for rid in sorted({i for i in ids if ids.count(i) > 1}):
            problems.append(f"duplicate index entry {rid}")
        on_disk = set()
        if os.path.isdir(self.path):
            for entry in sorted(os.listdir(self.path)):
                if os.path.isfile(os.path.join(self.path, entry, RUN_DOC)):
                    on_disk.add(entry)
        for rid in sorted(set(ids) - on_disk, key=str):
            problems.append(f"index entry {rid} has no {RUN_DOC}")
        for rid in sorted(on_disk - set(ids)):
            problems.append(f"run directory {rid} missing from the index")
        by_id = {r.get("run_id"): r for r in rows}
        for rid in sorted(on_disk & set(ids)):
            try:
                rec = self.load_run(rid)
            except SchemaVersionError as exc:
                problems.append(f"{rid}: {exc}")
                continue
            except (StorageError, KeyError, TypeError, ValueError) as exc:
                problems.append(f"{rid}: unreadable run document ({exc})")
                continue
            if rec.run_id != rid:
                problems.append(f"{rid}: document claims run_id {rec.run_id}")
            elif rec.index_row() != by_id[rid]:
                problems.append(f"{rid}: index row differs from the run document")
        return problems


def iter_records(store: Store, rows: Iterable[Mapping]) -> Iterable[RunRecord]:
    for r in rows:
        yield store.load_run(r["run_id"])
