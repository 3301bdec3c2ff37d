import os
import subprocess

import pytest

from gmt import machine
from gmt.clock import VirtualClock
from gmt.machine import CalibrationBaseline, IncomparableError, PreflightConfig
from gmt.reporters import ReporterFailure, ReporterSpec

from conftest import build_fake_host, const_script, write_file


def cfg(root, **kw):
    kw.setdefault("sleep", lambda s: None)
    ticks = iter(range(100))
    kw.setdefault("monotonic", lambda: float(next(ticks)))
    return PreflightConfig(root=root, **kw)


def snapshot(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            p = os.path.join(dirpath, f)
            with open(p, "rb") as fh:
                out[p] = fh.read()
    return out


def test_fingerprint(fake_host):
    assert machine.machine_fingerprint(fake_host) == "Fake CPU 3000|2|6.1.0-fake"


def test_temperature_threshold(tmp_path):
    hot = build_fake_host(tmp_path / "hot", temps=(70_000,))
    r = machine.check_cpu_temperature(cfg(hot, temp_threshold=65_000))
    assert r.status == "fail" and "70000" in r.observed
    cool = build_fake_host(tmp_path / "cool", temps=(40_000,))
    assert machine.check_cpu_temperature(cfg(cool)).status == "pass"


def test_missing_sensors_warn(tmp_path):
    empty = str(tmp_path / "empty")
    os.makedirs(os.path.join(empty, "proc"))
    results = machine.run_preflight(cfg(empty, checks=("cpu_temperature", "turbo_boost", "governor",
                                                       "interrupt_rate")))
    assert [r.status for r in results] == ["warn"] * 4
    assert "cannot verify" in results[1].message


def test_turbo(tmp_path):
    assert machine.check_turbo_boost(cfg(build_fake_host(tmp_path / "a", no_turbo="1"))).status == "pass"
    assert machine.check_turbo_boost(cfg(build_fake_host(tmp_path / "b", no_turbo="0"))).status == "fail"
    boost = build_fake_host(tmp_path / "c", no_turbo=None)
    write_file(os.path.join(boost, "sys/devices/system/cpu/cpufreq/boost"), "0\n")
    assert machine.check_turbo_boost(cfg(boost)).status == "pass"


def test_governor(tmp_path):
    root = build_fake_host(tmp_path / "a", governor="powersave")
    r = machine.check_governor(cfg(root))
    assert r.status == "fail" and "cpu0" in r.message
    assert machine.check_governor(cfg(root, governor="powersave")).status == "pass"


def test_interrupt_rate_arithmetic(fake_host):
    stat = os.path.join(fake_host, "proc/stat")

    def sleep(_):
        total = machine.read_interrupt_total(fake_host)
        with open(stat) as fh:
            text = fh.read()
        with open(stat, "w") as fh:
            fh.write(text.replace(f"intr {total} ", f"intr {total + 500} "))

    r = machine.check_interrupt_rate(cfg(fake_host, irq_threshold=1000, sleep=sleep))
    assert r.status == "pass" and r.observed == "500/s"
    r = machine.check_interrupt_rate(cfg(fake_host, irq_threshold=400, sleep=sleep))
    assert r.status == "fail"


def test_foreign_processes_detected(fake_host):
    assert machine.check_foreign_processes(cfg(fake_host)).status == "pass"
    proc = subprocess.Popen(["sleep", "30"], env={**os.environ, machine.RUN_ENV: "old-run"})
    try:
        r = machine.check_foreign_processes(cfg("/"))
        assert r.status == "fail" and str(proc.pid) in r.observed
        mine = machine.check_foreign_processes(cfg("/", run_id="old-run"))
        assert str(proc.pid) not in mine.observed
    finally:
        proc.kill()
        proc.wait()


def test_calibration_check(fake_host, tmp_path):
    store = str(tmp_path / "store")
    assert machine.check_calibration(cfg(fake_host, store_path=store)).status == "warn"
    base = CalibrationBaseline("now", 10_000_000, 5000.0, 100, 40000, machine.machine_fingerprint(fake_host))
    machine.save_baseline(store, base)
    assert machine.load_baseline(store) == base
    assert machine.check_calibration(cfg(fake_host, store_path=store)).status == "pass"
    other = build_fake_host(tmp_path / "other")
    write_file(os.path.join(other, "proc/sys/kernel/osrelease"), "7.0\n")
    assert machine.check_calibration(cfg(other, store_path=store)).status == "fail"


def test_preflight_is_read_only(fake_host, tmp_path):
    before = snapshot(fake_host)
    results = machine.run_preflight(cfg(fake_host, store_path=str(tmp_path / "s")))
    assert [r.check_id for r in results] == list(machine.CHECKS)
    assert snapshot(fake_host) == before
    assert not machine.preflight_failed(results)


def test_apply_cpu_settings_writes_only_on_request(tmp_path):
    root = build_fake_host(tmp_path / "h", governor="powersave", no_turbo="0")
    written = machine.apply_cpu_settings(root)
    assert len(written) == 3
    assert machine.check_turbo_boost(cfg(root)).status == "pass"
    assert machine.check_governor(cfg(root)).status == "pass"


def test_baseline_invariants():
    with pytest.raises(ValueError):
        CalibrationBaseline("now", 9_999_999, 1.0, 1, 1, "fp")
    with pytest.raises(ValueError):
        CalibrationBaseline("now", 10_000_000, -1.0, 1, 1, "fp")


def _calibrate(tmp_path, script, store=None):
    return machine.calibrate(10_000_000, [ReporterSpec("machine_power", script=script)], store_path=store,
                             clock=VirtualClock(500), accel=500)


def test_calibrate_constant_power(tmp_path):
    script = const_script(tmp_path / "p.script", 5_000, until_us=12_000_000, accel=500)
    store = str(tmp_path / "store")
    base = _calibrate(tmp_path, script, store)
    assert base.avg_power == 5000 and base.duration == 10_000_000
    assert machine.load_baseline(store) == base


def test_calibrate_mean_power(tmp_path):
    p = tmp_path / "p.script"
    p.write_text("".join(f"{t * 100_000}\t{1000 if t % 2 == 0 else 3000}\n" for t in range(100)))
    assert _calibrate(tmp_path, str(p)).avg_power == 2000


def test_calibrate_deterministic(tmp_path):
    script = const_script(tmp_path / "p.script", 4_321, until_us=12_000_000, accel=500)
    a, b = _calibrate(tmp_path, script), _calibrate(tmp_path, script)
    da, db = a.to_dict(), b.to_dict()
    da.pop("created_at"), db.pop("created_at")
    assert da == db


def test_calibrate_too_short():
    with pytest.raises(ValueError):
        machine.calibrate(5_000_000, [])


def test_calibrate_reporter_failure(tmp_path, monkeypatch):
    import sys
    from gmt import reporters as R
    monkeypatch.setattr(R, "sampler_command", lambda: [sys.executable, "-c", "import sys; sys.exit(3)"])
    script = const_script(tmp_path / "p.script", 1, accel=500)
    with pytest.raises(ReporterFailure):
        _calibrate(tmp_path, script)


def test_drift():
    ref = CalibrationBaseline("now", 10_000_000, 5000.0, None, None, "fp")
    assert machine.check_baseline_drift(5100.0, ref, 5).status == "pass"
    r = machine.check_baseline_drift(6000.0, ref, 5)
    assert r.status == "warn" and r.observed.startswith("20.00%")
    with pytest.raises(IncomparableError):
        machine.check_baseline_drift(10.0, CalibrationBaseline("now", 10_000_000, 0.0, None, None, "fp"))
    with pytest.raises(IncomparableError):
        machine.check_baseline_drift(None, ref)
