"""Acceptance criteria 1-11. Each test prints one PASS/FAIL/SKIP line.

The lines are also collected into the pytest terminal summary.
"""
import json
import math
import os
import random
import shutil
import subprocess
import sys
import tempfile
import threading
import time
import urllib.error
import urllib.request

import jsonschema
import pytest

from gmt.analysis import compare_runs, evaluate_rules
from gmt.api import load_schema, make_server
from gmt.backend import ProcessBackend
from gmt.cli import main as gmt_main
from gmt.clock import RealClock
from gmt.metrics import (PHASES, UNASSIGNED, PhaseMarker, PhaseStats, assign_phases, integrate_power,
                         wrap_corrected_delta)
from gmt.orchestrator import RunConfig, cmd_run
from gmt.reporters import ReporterSet, ReporterSpec, Sample, default_reporters, read_samples
from gmt.scenario import parse_scenario
from gmt.store import StorageError, Store

from conftest import ACCEPTANCE_LINES, TRIVIAL_SCENARIO, const_script, live_children, mock_config, strip_volatile, \
    write_file
from test_analysis import BASELINE, SCENARIO, clean_stats
from test_store import make_record


def verdict(n, ok, detail, elapsed=None, limit=None):
    timed_ok = limit is None or elapsed <= limit
    status = "PASS" if ok and timed_ok else "FAIL"
    timing = f" [{elapsed:.2f}s" + (f" / limit {limit:g}s]" if limit else "]") if elapsed is not None else ""
    line = f"criterion {n}: {status} {detail}{timing}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line
    assert timed_ok, line


def skip_line(n, why):
    line = f"criterion {n}: SKIP {why}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    pytest.skip(why)


# 1 ------------------------------------------------------------------------------

BUSY = "import time\nend = time.time() + {secs}\nwhile time.time() < end:\n    pass\n"


@pytest.mark.slow
def test_criterion_1_reporter_overhead(tmp_path):
    secs = 60
    script = write_file(str(tmp_path / "busy.py"), BUSY.format(secs=secs + 5))
    scen = parse_scenario(f"name: busy\nservices: [{{name: app, image_or_command: '{sys.executable} {script}', "
                          f"boot_ready: fixed-delay 1}}]\nflow: [{{name: s, service: app, command: 'true'}}]\n")
    inst = str(tmp_path / "instances.tsv")
    backend = ProcessBackend(str(tmp_path / "w"), instances_file=inst)
    backend.boot(scen)
    specs = default_reporters("/")
    clock = RealClock()
    rset = ReporterSet(specs, str(tmp_path), 100_000, clock.t0_ns, instances_file=inst)
    try:
        wall0 = time.monotonic()
        rset.start()
        time.sleep(secs)
        failures = rset.stop(clock.now())
        wall = time.monotonic() - wall0
    finally:
        backend.teardown()
    cpu = rset.cpu_time_s
    pct = cpu / wall * 100
    rows = sum(len(read_samples(rset.path(s))) for s in specs)
    verdict(1, pct < 1.0 and not failures and rows > 0,
            f"reporter CPU {cpu:.3f}s over {wall:.1f}s wall = {pct:.3f}% (< 1%), "
            f"{len(specs)} reporters: {', '.join(s.name for s in specs)}")


# 2 ------------------------------------------------------------------------------

def test_criterion_2_lifecycle_completeness(tmp_path):
    t0 = time.monotonic()
    d = tmp_path
    scripts = {"machine_power": const_script(d / "p.script", 5000),
               "cpu_util": const_script(d / "c.script", 2500)}
    scen = write_file(str(d / "s.gmt.yml"), TRIVIAL_SCENARIO)
    (rid,) = cmd_run(mock_config(scen, str(d / "store"), scripts))
    rec = Store(str(d / "store")).load_run(rid)
    top = [m for m in rec.markers if m.sub is None]
    ordered = [m.phase for m in top] == list(PHASES)
    disjoint = all(a.end <= b.start for i, a in enumerate(top) for b in top[i + 1:])
    verdict(2, rec.status == "completed" and ordered and disjoint and live_children() == [],
            f"markers {[m.phase for m in top]}, pairwise disjoint={disjoint}", time.monotonic() - t0, 120)


# 3 ------------------------------------------------------------------------------

def shadow_counter(increments, wrap_max, start):
    """Observed readings of a counter advanced by ``increments``; returns (readings, true total)."""
    modulus = wrap_max + 1
    true = start
    readings = [start % modulus]
    for inc in increments:
        true += inc
        readings.append(true % modulus)
    return readings, true - start


def test_criterion_3_wraparound_oracle():
    rng = random.Random(3)
    t0 = time.monotonic()
    bad = 0
    wraps = 0
    for _ in range(10_000):
        wrap_max = rng.choice([255, 65_535, 2**32 - 1, 262_143_328_850, 2**64 - 1])
        n = rng.randint(1, 60)
        # each step stays within one counter range: at most one wrap per interval
        incs = [rng.randint(0, wrap_max) if rng.random() < 0.1 else rng.randint(0, max(1, wrap_max // 50))
                for _ in range(n)]
        readings, true = shadow_counter(incs, wrap_max, rng.randint(0, wrap_max))
        wraps += sum(1 for a, b in zip(readings, readings[1:]) if b < a)
        if wrap_corrected_delta(readings, wrap_max) != true:
            bad += 1
    verdict(3, bad == 0 and wraps > 0, f"10000 series, {wraps} injected wraps, {bad} mismatches",
            time.monotonic() - t0, 5)


# 4 ------------------------------------------------------------------------------

def test_criterion_4_integration_accuracy():
    t0 = time.monotonic()
    base, amp, period = 20_000, 15_000, 2_000_000  # mW, mW, µs
    end = 10_000_000
    samples = [Sample(t, round(base + amp * math.sin(2 * math.pi * t / period))) for t in range(0, end + 1, 10_000)]

    def exact(a, b):
        # ∫ mW dµs / 1000 = µJ
        w = 2 * math.pi / period
        return (base * (b - a) - amp / w * (math.cos(w * b) - math.cos(w * a))) / 1000

    worst = 0.0
    for a, b in [(0, end), (0, 1_234_567), (333_333, 7_777_777), (5_000, 505_000)]:
        got = integrate_power(samples, (a, b))
        worst = max(worst, abs(got - exact(a, b)) / exact(a, b) * 100)
    rng = random.Random(4)
    gap = 0.0
    for _ in range(200):
        a, m, b = sorted(rng.sample(range(0, end), 3))
        gap = max(gap, abs(integrate_power(samples, (a, m)) + integrate_power(samples, (m, b))
                           - integrate_power(samples, (a, b))))
    verdict(4, worst <= 0.5 and gap <= 1.0,
            f"max relative error {worst:.4f}% (<= 0.5%), max additivity gap {gap:.2e} µJ (<= 1)",
            time.monotonic() - t0, 1)


# 5 ------------------------------------------------------------------------------

def test_criterion_5_partition():
    rng = random.Random(5)
    t0 = time.monotonic()
    violations = 0
    for _ in range(1_000):
        cuts = sorted(rng.sample(range(0, 1_000_000), rng.randint(2, 12)))
        markers = []
        for i, (a, b) in enumerate(zip(cuts, cuts[1:])):
            if rng.random() < 0.8:
                markers.append(PhaseMarker(f"p{i}", a, b))
        samples = [Sample(rng.randint(-1000, 1_001_000), i) for i in range(rng.randint(0, 200))]
        buckets = assign_phases(samples, markers)
        seen = [s.value for bucket in buckets.values() for s in bucket]
        if sorted(seen) != sorted(s.value for s in samples):
            violations += 1
            continue
        for m in markers:
            # oracle: brute-force membership
            want = sorted(s.value for s in samples if m.start <= s.t < m.end)
            if sorted(s.value for s in buckets[m.label]) != want:
                violations += 1
        outside = sorted(s.value for s in samples if not any(m.start <= s.t < m.end for m in markers))
        if sorted(s.value for s in buckets[UNASSIGNED]) != outside:
            violations += 1
    verdict(5, violations == 0, f"1000 instances, {violations} violations", time.monotonic() - t0, 5)


# 6 ------------------------------------------------------------------------------

def test_criterion_6_rule_engine():
    t0 = time.monotonic()
    cases = {"R1": {"peak": 100_000_000}, "R2": {"boot_us": 12_000_000}, "R3": {"ipc": 30},
             "R4": {"faults": 2000}, "R5": {"idle_mw": 8000}}
    got = {rid: [f.rule_id for f in evaluate_rules(clean_stats(**o), SCENARIO, BASELINE)] for rid, o in cases.items()}
    clean = evaluate_rules(clean_stats(), SCENARIO, BASELINE)
    ok = all(got[r] == [r] for r in cases) and clean == []
    verdict(6, ok, f"tripped {got}, clean run findings {len(clean)}", time.monotonic() - t0, 1)


# 7 ------------------------------------------------------------------------------

def test_criterion_7_comparison():
    t0 = time.monotonic()
    stats = clean_stats()
    same = compare_runs(stats, stats)
    identity = all(r.rel_delta == 0 and not r.flagged for r in same.rows)
    e = lambda uj: [PhaseStats("runtime", "energy", "counter", "µJ", 1, energy_total=uj)]  # noqa: E731
    (row,) = compare_runs(e(100_000_000), e(80_000_000)).rows
    ok = identity and row.rel_delta == pytest.approx(-20.0) and row.flagged
    verdict(7, ok, f"self-compare all zero and unflagged={identity}; 100 J -> 80 J gives "
                   f"{row.rel_delta:+.2f}% flagged={row.flagged}", time.monotonic() - t0, 1)


# 8 ------------------------------------------------------------------------------

def test_criterion_8_determinism(tmp_path):
    t0 = time.monotonic()
    d = tmp_path
    scripts = {"machine_power": const_script(d / "p.script", 5000),
               "mem_used.instance": const_script(d / "m.script", 100_000_000, detail="app"),
               "cpu_util": const_script(d / "c.script", 2500)}
    scen = write_file(str(d / "s.gmt.yml"), TRIVIAL_SCENARIO)
    src = write_file(str(d / "app.py"), "def hit():\n    return sum(range(10))\n\nhit()\n")
    ann = write_file(str(d / "ann.yml"), f"- {{step: hit, source_path: {src}, start: 1, end: 2}}\n")
    cfg = mock_config(scen, str(d / "store"), scripts, advisor_enabled=True, annotations_path=ann)
    store = Store(str(d / "store"))
    a = strip_volatile(store.load_document(cmd_run(cfg)[0]))
    b = strip_volatile(store.load_document(cmd_run(cfg)[0]))
    verdict(8, a == b and len(a["recommendations"]) == 1,
            f"run.json equal minus run_id/timestamps={a == b}, stub recommendations {len(a['recommendations'])}",
            time.monotonic() - t0, 120)


# 9 ------------------------------------------------------------------------------

def test_criterion_9_store_integrity(tmp_path, monkeypatch, capsys):
    t0 = time.monotonic()
    store = Store(str(tmp_path / "store"))
    rec = make_record(0)
    store.save_run(rec)
    round_trip = store.load_run(rec.run_id) == rec

    index = os.path.join(store.path, "index.json")
    before = open(index).read()
    real = os.replace

    def crash(src, dst):
        raise OSError("simulated crash before rename")

    monkeypatch.setattr(os, "replace", crash)
    victim = make_record(1)
    try:
        store.save_run(victim)
        crashed = False
    except StorageError:
        crashed = True
    monkeypatch.setattr(os, "replace", real)
    unchanged = crashed and open(index).read() == before and not os.path.exists(
        os.path.join(store.run_dir(victim.run_id), "run.json"))

    rng = random.Random(9)
    for i in range(50):
        store.save_run(make_record(10 + i, status=rng.choice(["completed", "aborted"]), scenario=rng.choice("xyz")))
    capsys.readouterr()
    code = gmt_main(["--store", store.path, "verify-store"])
    out = capsys.readouterr().out.strip()
    verdict(9, round_trip and unchanged and code == 0,
            f"round trip={round_trip}, index unchanged after crash={unchanged}, verify-store after 50 saves: "
            f"exit {code} '{out}'", time.monotonic() - t0, 10)


# 10 -----------------------------------------------------------------------------

def test_criterion_10_api_contract(populated_store):
    t0 = time.monotonic()
    srv = make_server(populated_store["path"], "127.0.0.1", 0)
    threading.Thread(target=srv.serve_forever, daemon=True).start()
    base = f"http://127.0.0.1:{srv.server_address[1]}"
    rid = populated_store["completed"][0]

    def get(url):
        try:
            with urllib.request.urlopen(base + url, timeout=10) as r:
                return r.status, r.headers["Content-Type"], json.loads(r.read())
        except urllib.error.HTTPError as exc:
            return exc.code, exc.headers["Content-Type"], json.loads(exc.read())

    cases = [("/v1/runs", 200, "index"), (f"/v1/runs/{rid}", 200, "run"),
             (f"/v1/runs/{rid}/findings", 200, "findings"), (f"/v1/compare?a={rid}&b={rid}", 200, "comparison"),
             ("/v1/runs/unknown", 404, "error"), ("/v1/runs/unknown/findings", 404, "error"),
             ("/v1/compare?a=" + rid, 400, "error"), ("/v1/runs?bogus=1", 400, "error")]
    results = []
    try:
        for url, want, schema in cases:
            status, ctype, body = get(url)
            try:
                jsonschema.validate(body, load_schema(schema))
                schema_ok = True
            except jsonschema.ValidationError:
                schema_ok = False
            results.append(status == want and schema_ok and ctype.startswith("application/json"))
        _, _, cmp = get(f"/v1/compare?a={rid}&b={rid}")
        zero = all(r["rel_delta"] in (0, None) for r in cmp["rows"])
    finally:
        srv.shutdown()
        srv.server_close()
    verdict(10, all(results) and zero, f"{sum(results)}/{len(results)} endpoint checks schema-valid with the "
                                       f"expected status; self-compare all zero={zero}", time.monotonic() - t0, 10)


# 11 -----------------------------------------------------------------------------

POWERCAP = "/sys/class/powercap"


def _engine():
    for name in ("docker", "podman"):
        if shutil.which(name) and subprocess.run([name, "info"], capture_output=True).returncode == 0:
            return name
    return None


def _energy_zone():
    path = os.path.join(POWERCAP, "intel-rapl:0", "energy_uj")
    return path if os.access(path, os.R_OK) else None


@pytest.mark.e2e
def test_criterion_11_real_container_and_energy(tmp_path):
    engine, zone = _engine(), _energy_zone()
    if engine is None or zone is None:
        skip_line(11, f"needs a container engine and a readable powercap zone "
                      f"(engine={engine or 'none'}, powercap={'yes' if zone else 'no'})")
    t0 = time.monotonic()
    scen = write_file(str(tmp_path / "c.gmt.yml"), "name: container\nservices:\n"
                      "  - {name: web, image_or_command: 'nginx:alpine', boot_ready: {log_pattern: 'start worker'}}\n"
                      "flow:\n  - {name: hit, service: web, command: 'wget -q -O /dev/null http://127.0.0.1/'}\n")
    cfg = RunConfig(scen, str(tmp_path / "store"), backend_kind="container", engine=engine, skip_checks=True,
                    reporters=[ReporterSpec("energy_pkg"), ReporterSpec("cpu_util")], baseline_us=5_000_000,
                    idle_us=5_000_000)
    (rid,) = cmd_run(cfg)
    store = Store(cfg.store_path)
    rec = store.load_run(rid)
    samples = read_samples(os.path.join(store.run_dir(rid), "raw", "energy_pkg.samples"))
    max_range = int(open(os.path.join(POWERCAP, "intel-rapl:0", "max_energy_range_uj")).read())
    by_zone = {}
    for s in samples:
        by_zone.setdefault(s.detail, []).append(s.value)
    monotone = all(all(0 <= (b - a) % (max_range + 1) < (max_range + 1) // 2 for a, b in zip(v, v[1:]))
                   for v in by_zone.values())
    phases = [m.phase for m in rec.markers if m.sub is None]
    verdict(11, rec.status == "completed" and phases == list(PHASES) and monotone and len(samples) > 1,
            f"{engine} run status {rec.status}, phases {phases}, {len(samples)} energy samples, "
            f"monotone modulo wrap={monotone}", time.monotonic() - t0)
