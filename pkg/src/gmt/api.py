"""Read-only JSON API over a run store.

GET /v1/runs                 index rows, newest first; filters: scenario, digest, since, until
GET /v1/runs/{id}            full run document
GET /v1/runs/{id}/findings   findings list
GET /v1/compare?a=&b=        comparison; optional noise=<id>,<id>,... of repeated runs
"""
from __future__ import annotations

import json
import logging
import re
from importlib import resources
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Sequence
from urllib.parse import parse_qs, urlsplit

from .analysis import Comparison, NothingComparable, compare_runs, noise_from_runs
from .store import NotFound, SchemaVersionError, StorageError, Store

log = logging.getLogger(__name__)

RUN_FILTERS = {"scenario": "scenario_name", "digest": "scenario_digest", "since": "since", "until": "until"}
_RUN = re.compile(r"^/v1/runs/([^/]+)$")
_FINDINGS = re.compile(r"^/v1/runs/([^/]+)/findings$")


def load_schema(name: str) -> dict:
    """Published JSON schema: run, index, findings, comparison or error."""
    return json.loads((resources.files("gmt") / "schemas" / f"{name}.json").read_text(encoding="utf-8"))


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code


def compare_stored(store: Store, run_a: str, run_b: str, noise_ids: Sequence[str] = ()) -> Comparison:
    """Compare two stored runs. Raises NotFound or NothingComparable."""
    a, b = store.load_run(run_a), store.load_run(run_b)
    noise = noise_from_runs([store.load_run(r).stats for r in noise_ids]) if noise_ids else None
    return compare_runs(a.stats, b.stats, noise, run_a=run_a, run_b=run_b,
                        digest_a=a.scenario_digest, digest_b=b.scenario_digest)


def _one(query: dict, name: str, required: bool = True) -> str | None:
    vals = query.get(name)
    if not vals:
        if required:
            raise ApiError(400, "bad_request", f"missing query parameter {name!r}")
        return None
    if len(vals) > 1:
        raise ApiError(400, "bad_request", f"query parameter {name!r} given more than once")
    return vals[0]


def handle(store: Store, path: str, query_string: str) -> tuple[int, object]:
    """Route one GET request; returns (status, JSON-able body)."""
    try:
        query = parse_qs(query_string, keep_blank_values=True, strict_parsing=bool(query_string))
    except ValueError:
        return 400, {"error": "bad_request", "message": "malformed query string"}
    try:
        if path == "/v1/runs":
            unknown = sorted(set(query) - set(RUN_FILTERS))
            if unknown:
                raise ApiError(400, "bad_request", f"unknown filter(s): {', '.join(unknown)}")
            kw = {RUN_FILTERS[k]: _one(query, k) for k in query}
            return 200, store.list_runs(**kw)
        m = _FINDINGS.match(path)
        if m:
            return 200, [f.to_dict() for f in store.load_run(m.group(1)).findings]
        m = _RUN.match(path)
        if m:
            return 200, store.load_document(m.group(1))
        if path == "/v1/compare":
            a, b = _one(query, "a"), _one(query, "b")
            noise = _one(query, "noise", required=False)
            ids = [x for x in noise.split(",") if x] if noise else []
            return 200, compare_stored(store, a, b, ids).to_dict()
        raise ApiError(404, "not_found", f"no route for {path}")
    except ApiError as exc:
        return exc.status, {"error": exc.code, "message": str(exc)}
    except NotFound as exc:
        return 404, {"error": "not_found", "message": str(exc)}
    except NothingComparable as exc:
        return 400, {"error": "nothing_comparable", "message": str(exc)}
    except SchemaVersionError as exc:
        return 500, {"error": "schema_version", "message": str(exc)}
    except (StorageError, OSError, ValueError, KeyError, TypeError) as exc:
        log.exception("request %s failed", path)
        return 500, {"error": "storage", "message": str(exc)}


class Handler(BaseHTTPRequestHandler):
    store: Store  # set on the subclass built by make_server
    server_version = "gmt-api/1"

    def _send(self, status: int, body: object, extra: dict | None = None) -> None:
        data = (json.dumps(body, sort_keys=True, ensure_ascii=False) + "\n").encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(data)))
        for k, v in (extra or {}).items():
            self.send_header(k, v)
        self.end_headers()
        if self.command != "HEAD":
            self.wfile.write(data)

    def do_GET(self) -> None:
        parts = urlsplit(self.path)
        status, body = handle(self.store, parts.path.rstrip("/") or "/", parts.query)
        self._send(status, body)

    def _not_allowed(self) -> None:
        self._send(405, {"error": "method_not_allowed", "message": f"{self.command} not allowed; the API is read-only"},
                   {"Allow": "GET"})

    do_POST = do_PUT = do_DELETE = do_PATCH = do_HEAD = do_OPTIONS = _not_allowed

    def log_message(self, fmt: str, *args) -> None:
        log.info("%s %s", self.address_string(), fmt % args)


def make_server(store_path: str, host: str = "127.0.0.1", port: int = 8080) -> ThreadingHTTPServer:
    handler = type("StoreHandler", (Handler,), {"store": Store(store_path)})
    server = ThreadingHTTPServer((host, port), handler)
    server.daemon_threads = True
    return server


def serve_api(store_path: str, host: str = "127.0.0.1", port: int = 8080) -> None:
    server = make_server(store_path, host, port)
    log.info("serving %s on http://%s:%d", store_path, *server.server_address[:2])
    try:
        server.serve_forever()
    finally:
        server.server_close()
