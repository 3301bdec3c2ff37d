import json
import os
import random
import threading
from datetime import datetime, timedelta, timezone

import pytest

from gmt.advisor import CodeSegment, Recommendation
from gmt.analysis import Finding
from gmt.metrics import PHASES, PhaseMarker, PhaseStats
from gmt.store import (DuplicateId, NotFound, RunRecord, SchemaVersionError, StorageError, Store, canonical_json,
                       new_run_id)

T0 = datetime(2026, 3, 1, tzinfo=timezone.utc)


def make_record(i=0, status="completed", scenario="demo", digest="d1"):
    started = T0 + timedelta(minutes=i)
    markers = [PhaseMarker(p, k * 10, k * 10 + 10) for k, p in enumerate(PHASES)]
    markers.append(PhaseMarker("runtime", 40, 45, "hit"))
    if status == "aborted":
        markers = markers[:3]
    finding = Finding("R2", "warn", "boot", "duration", 12e6, 10e6, "µs", "long boot")
    seg = CodeSegment("app.py", (1, 2), "x = 1\ny = 2\n", finding)
    return RunRecord(
        run_id=new_run_id(started), scenario_digest=digest, scenario_name=scenario, machine_fingerprint="fp",
        started_at=started.isoformat(), finished_at=(started + timedelta(seconds=30)).isoformat(),
        markers=markers,
        stats=[PhaseStats("boot", "cpu_util", "gauge", "centi-percent", 10, n_samples=2, mean=1.5, min=1, max=2,
                          stddev=0.5),
               PhaseStats("boot", "energy", "counter", "µJ", 10, energy_total=42, energy_source="energy_pkg")],
        findings=[finding],
        recommendations=[Recommendation(seg, "rate", "p", "RATING: 5", 5, "stub", "now", "hit")],
        status=status, reason="boot timeout" if status == "aborted" else None,
        scenario={"name": scenario}, warnings=["w"], unassigned={"cpu_util.machine": 3},
    )


@pytest.fixture
def store(tmp_path):
    return Store(str(tmp_path / "store"))


def test_round_trip(store):
    rec = make_record()
    store.save_run(rec)
    assert store.load_run(rec.run_id) == rec
    with open(os.path.join(store.run_dir(rec.run_id), "run.json")) as fh:
        text = fh.read()
    assert text == canonical_json(rec.to_dict())
    assert json.loads(text)["schema_version"] == 1


def test_aborted_record_round_trip(store):
    rec = make_record(status="aborted")
    store.save_run(rec)
    assert store.load_run(rec.run_id).reason == "boot timeout"


def test_validation(store):
    rec = make_record()
    rec.markers = rec.markers[:4]
    with pytest.raises(ValueError):
        store.save_run(rec)
    rec = make_record(status="aborted")
    rec.reason = None
    with pytest.raises(ValueError):
        store.save_run(rec)


def test_duplicate_id(store):
    rec = make_record()
    store.save_run(rec)
    with pytest.raises(DuplicateId):
        store.save_run(rec)


def test_empty_store_and_not_found(store):
    assert store.list_runs() == []
    with pytest.raises(NotFound):
        store.load_run("nope")
    with pytest.raises(NotFound):
        store.load_run("../etc")
    assert store.verify() == []


def test_newest_first_and_filters(store):
    recs = [make_record(i, scenario="a" if i % 2 else "b", digest=f"d{i % 2}") for i in (1, 0, 2)]
    for r in recs:
        store.save_run(r)
    rows = store.list_runs()
    assert [r["run_id"] for r in rows] == sorted((r.run_id for r in recs), reverse=True)
    assert [r["scenario_name"] for r in store.list_runs(scenario_name="a")] == ["a"]
    assert len(store.list_runs(scenario_digest="d0")) == 2
    assert len(store.list_runs(since=(T0 + timedelta(minutes=1)).isoformat())) == 2
    assert len(store.list_runs(until=T0.isoformat())) == 1


@pytest.mark.parametrize("nth", [1, 2])
def test_crash_before_rename(store, monkeypatch, nth):
    first = make_record(0)
    store.save_run(first)
    index_before = open(os.path.join(store.path, "index.json")).read()
    calls = []
    real = os.replace

    def crash(src, dst):
        calls.append(dst)
        if len(calls) == nth:
            raise OSError("simulated crash")
        return real(src, dst)

    monkeypatch.setattr(os, "replace", crash)
    rec = make_record(1)
    with pytest.raises(StorageError):
        store.save_run(rec)
    monkeypatch.setattr(os, "replace", real)
    assert open(os.path.join(store.path, "index.json")).read() == index_before
    assert [r["run_id"] for r in store.list_runs()] == [first.run_id]
    with pytest.raises(NotFound):
        store.load_run(rec.run_id)
    assert store.verify() == []
    leftovers = [f for _, _, files in os.walk(store.path) for f in files if f.startswith(".tmp-")]
    assert leftovers == []


def test_future_schema_isolated(store):
    good, bad = make_record(0), make_record(1)
    store.save_run(good)
    store.save_run(bad)
    path = os.path.join(store.run_dir(bad.run_id), "run.json")
    doc = json.load(open(path))
    doc["schema_version"] = 99
    with open(path, "w") as fh:
        json.dump(doc, fh)
    with pytest.raises(SchemaVersionError):
        store.load_run(bad.run_id)
    assert store.load_run(good.run_id) == good
    assert len(store.list_runs()) == 2
    assert any("schema_version" in p for p in store.verify())


def test_verify_detects_drift(store):
    rec = make_record()
    store.save_run(rec)
    os.makedirs(os.path.join(store.path, "stray"))
    json.dump(make_record(5).to_dict(), open(os.path.join(store.path, "stray", "run.json"), "w"))
    problems = store.verify()
    assert any("stray" in p for p in problems)
    os.remove(os.path.join(store.run_dir(rec.run_id), "run.json"))
    assert any(rec.run_id in p for p in store.verify())


def test_verify_after_random_saves(store):
    rng = random.Random(7)
    saved = []
    for i in range(50):
        rec = make_record(rng.randrange(10_000), status=rng.choice(["completed", "aborted"]),
                          scenario=rng.choice("abc"))
        if saved and rng.random() < 0.2:
            rec.run_id = rng.choice(saved)
            with pytest.raises(DuplicateId):
                store.save_run(rec)
            continue
        store.save_run(rec)
        saved.append(rec.run_id)
        assert store.verify() == []
    assert len(store.list_runs()) == len(saved)


def test_run_ids_sort_by_time():
    a = new_run_id(T0)
    b = new_run_id(T0 + timedelta(microseconds=1))
    assert a < b and a != new_run_id(T0)


def test_reader_tolerates_concurrent_saves(store):
    errors = []
    stop = threading.Event()

    def reader():
        while not stop.is_set():
            try:
                store.list_runs()
            except Exception as exc:  # noqa: BLE001
                errors.append(exc)

    t = threading.Thread(target=reader)
    t.start()
    for i in range(30):
        store.save_run(make_record(i))
    stop.set()
    t.join()
    assert errors == []
