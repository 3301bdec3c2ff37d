import filecmp
import hashlib
import json
import os
import shutil
import threading
import urllib.error
import urllib.request

import jsonschema
import pytest

from gmt.api import handle, load_schema, make_server
from gmt.metrics import PHASES, PhaseMarker, PhaseStats
from gmt.store import RunRecord, Store

DOCS_SCHEMAS = os.path.join(os.path.dirname(__file__), "..", "docs", "schemas")


def tree_digest(path):
    h = hashlib.sha256()
    for dirpath, dirs, files in sorted(os.walk(path)):
        dirs.sort()
        for f in sorted(files):
            p = os.path.join(dirpath, f)
            h.update(p.encode())
            h.update(open(p, "rb").read())
    return h.hexdigest()


@pytest.fixture(scope="module")
def api(populated_store, tmp_path_factory):
    path = str(tmp_path_factory.mktemp("api") / "store")
    shutil.copytree(populated_store["path"], path)
    # a run that shares no phase/metric with the others
    lone = RunRecord("29990101T000000000000Z-aaaaaa", "dz", "lone", "fp", "2999-01-01T00:00:00+00:00",
                     "2999-01-01T00:00:01+00:00", [PhaseMarker(p, i, i + 1) for i, p in enumerate(PHASES)],
                     [PhaseStats("boot", "temp_cpu", "gauge", "m°C", 1, n_samples=1, mean=1.0, min=1, max=1,
                                 stddev=0.0)])
    Store(path).save_run(lone)
    before = tree_digest(path)
    srv = make_server(path, "127.0.0.1", 0)
    threading.Thread(target=srv.serve_forever, daemon=True).start()
    base = f"http://127.0.0.1:{srv.server_address[1]}"
    yield {"base": base, "path": path, "lone": lone.run_id, **populated_store}
    srv.shutdown()
    srv.server_close()
    assert tree_digest(path) == before, "API mutated the store"


def get(api, url, method="GET"):
    req = urllib.request.Request(api["base"] + url, method=method)
    try:
        with urllib.request.urlopen(req, timeout=10) as resp:
            return resp.status, resp.headers, json.loads(resp.read() or b"null")
    except urllib.error.HTTPError as exc:
        body = exc.read()
        return exc.code, exc.headers, json.loads(body) if body else None


def valid(doc, schema):
    jsonschema.validate(doc, load_schema(schema))
    return True


def test_runs_listing(api):
    status, headers, body = get(api, "/v1/runs")
    assert status == 200 and headers["Content-Type"].startswith("application/json")
    assert valid(body, "index") and len(body) == 4
    assert body[0]["run_id"] == api["lone"]
    status, _, body = get(api, "/v1/runs?scenario=broken")
    assert status == 200 and [r["run_id"] for r in body] == [api["aborted"]]


def test_run_document(api):
    rid = api["completed"][0]
    status, _, body = get(api, f"/v1/runs/{rid}")
    assert status == 200 and valid(body, "run") and body["run_id"] == rid
    status, _, body = get(api, f"/v1/runs/{api['aborted']}")
    assert status == 200 and valid(body, "run") and body["status"] == "aborted"


def test_findings(api):
    status, _, body = get(api, f"/v1/runs/{api['completed'][0]}/findings")
    assert status == 200 and valid(body, "findings")
    assert "R1" in [f["rule_id"] for f in body]


def test_compare_identity(api):
    rid = api["completed"][0]
    status, _, body = get(api, f"/v1/compare?a={rid}&b={rid}")
    assert status == 200 and valid(body, "comparison")
    assert body["rows"] and all(r["rel_delta"] in (0, None) and not r["flagged"] for r in body["rows"])


def test_compare_with_noise(api):
    a, b = api["completed"]
    status, _, body = get(api, f"/v1/compare?a={a}&b={b}&noise={a},{b}")
    assert status == 200 and valid(body, "comparison") and body["noise_used"]


@pytest.mark.parametrize("url,status", [
    ("/v1/runs/unknown", 404), ("/v1/runs/unknown/findings", 404), ("/v2/runs", 404), ("/", 404),
    ("/v1/compare?a=x", 400), ("/v1/compare?a=unknown&b=unknown", 404), ("/v1/runs?color=red", 400),
    ("/v1/runs?scenario=a&scenario=b", 400),
])
def test_error_statuses(api, url, status):
    got, headers, body = get(api, url)
    assert got == status and valid(body, "error")
    assert headers["Content-Type"].startswith("application/json")


def test_nothing_comparable_is_400(api):
    status, _, body = get(api, f"/v1/compare?a={api['lone']}&b={api['completed'][0]}")
    assert status == 400 and body["error"] == "nothing_comparable" and valid(body, "error")


@pytest.mark.parametrize("method", ["POST", "PUT", "DELETE", "PATCH"])
def test_read_only(api, method):
    status, headers, body = get(api, "/v1/runs", method)
    assert status == 405 and headers["Allow"] == "GET" and valid(body, "error")


def test_empty_store(tmp_path):
    assert handle(Store(str(tmp_path / "none")), "/v1/runs", "") == (200, [])


def test_future_schema_is_500(api, tmp_path):
    path = str(tmp_path / "s")
    shutil.copytree(api["path"], path)
    rid = api["completed"][0]
    doc_path = os.path.join(path, rid, "run.json")
    doc = json.load(open(doc_path))
    doc["schema_version"] = 99
    json.dump(doc, open(doc_path, "w"))
    status, body = handle(Store(path), f"/v1/runs/{rid}", "")
    assert status == 500 and valid(body, "error")
    assert handle(Store(path), f"/v1/runs/{api['completed'][1]}", "")[0] == 200


def test_published_schemas_match_package_copies():
    pkg = os.path.join(os.path.dirname(__file__), "..", "src", "gmt", "schemas")
    names = sorted(os.listdir(pkg))
    assert names == sorted(os.listdir(DOCS_SCHEMAS))
    match, mismatch, errors = filecmp.cmpfiles(pkg, DOCS_SCHEMAS, names, shallow=False)
    assert mismatch == [] and errors == []
    for n in names:
        jsonschema.Draft202012Validator.check_schema(json.load(open(os.path.join(pkg, n))))


def test_head_not_allowed(api):
    status, headers, body = get(api, "/v1/runs", "HEAD")
    assert status == 405 and headers["Allow"] == "GET" and body is None
