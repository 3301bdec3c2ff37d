import json
import os
import shutil
import subprocess
import sys

import pytest

from gmt.cli import main

from conftest import TRIVIAL_SCENARIO, build_fake_host, write_file


@pytest.fixture
def env(tmp_path, mock_scripts, scenario_file):
    store = str(tmp_path / "store")
    mocks = [a for k, v in mock_scripts.items() for a in ("--mock", f"{k}={v}")]
    run = ["--store", store, "run", scenario_file, "--skip-checks", "--reporter", "cpu_util", "--time-accel", "200",
           "--baseline-seconds", "3", "--idle-seconds", "3", *mocks]
    return {"store": store, "run": run, "tmp": tmp_path, "scenario": scenario_file}


def run_ids(out):
    return [line.split("\t")[0] for line in out.strip().splitlines()]


def test_run_report_compare_list_verify(env, capsys):
    assert main(env["run"] + ["--repetitions", "2"]) == 0
    out = capsys.readouterr().out
    a, b = run_ids(out)
    assert out.count("\tcompleted") == 2

    html = str(env["tmp"] / "r.html")
    assert main(["--store", env["store"], "report", a, "-o", html]) == 0
    assert open(html).read().count("<svg") == 3
    assert capsys.readouterr().out == html + "\n"

    assert main(["--store", env["store"], "compare", a, a, "--json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["rows"] and not any(r["flagged"] for r in doc["rows"])

    chtml = str(env["tmp"] / "c.html")
    assert main(["--store", env["store"], "compare", a, b, "-o", chtml, "--noise", f"{a},{b}"]) == 0
    assert "2× the relative stddev" in open(chtml).read()

    capsys.readouterr()
    assert main(["--store", env["store"], "list"]) == 0
    assert run_ids(capsys.readouterr().out) == [b, a]
    assert main(["--store", env["store"], "list", "--json", "--scenario", "nope"]) == 0
    assert json.loads(capsys.readouterr().out) == []

    assert main(["--store", env["store"], "verify-store"]) == 0
    assert capsys.readouterr().out == "store ok\n"


def test_aborted_run_exit_1(env, capsys):
    bad = write_file(str(env["tmp"] / "bad.gmt.yml"), TRIVIAL_SCENARIO.replace('"echo hi"', '"exit 9"'))
    args = list(env["run"])
    args[args.index(env["scenario"])] = bad
    assert main(args) == 1
    assert "\taborted\t" in capsys.readouterr().out


def test_usage_errors_exit_2(env, capsys):
    assert main(["--store", env["store"], "report", "nope"]) == 2
    assert main(env["run"] + ["--repetitions", "0"]) == 2
    assert main(env["run"] + ["--reporter-option", "novalue"]) == 2
    assert main(env["run"] + ["--reporter", "warp_drive"]) == 2
    bad = write_file(str(env["tmp"] / "bad.gmt.yml"), "name: [\n")
    args = list(env["run"])
    args[args.index(env["scenario"])] = bad
    assert main(args) == 2
    assert main(["--store", env["store"], "preflight", "--check", "vibes"]) == 2
    with pytest.raises(SystemExit) as ei:
        main(["frobnicate"])
    assert ei.value.code == 2


def test_preflight_exit_codes(tmp_path, capsys):
    cool = build_fake_host(tmp_path / "cool")
    hot = build_fake_host(tmp_path / "hot", temps=(80_000,))
    checks = ["--check", "cpu_temperature", "--check", "turbo_boost", "--check", "governor"]
    assert main(["--store", str(tmp_path / "s"), "preflight", "--root", cool, *checks]) == 0
    assert main(["--store", str(tmp_path / "s"), "preflight", "--root", hot, "--json", *checks]) == 3
    out = capsys.readouterr().out
    doc = json.loads(out[out.index("["):])
    assert [r["status"] for r in doc] == ["fail", "pass", "pass"]


def test_run_blocked_by_preflight_exit_3(env, tmp_path):
    hot = build_fake_host(tmp_path / "hot", temps=(80_000,))
    args = [a for a in env["run"] if a != "--skip-checks"] + ["--root", hot]
    assert main(args) == 3


def test_verify_store_problems_exit_1(env, capsys):
    assert main(env["run"]) == 0
    (rid,) = run_ids(capsys.readouterr().out)
    os.remove(os.path.join(env["store"], rid, "run.json"))
    assert main(["--store", env["store"], "verify-store"]) == 1
    assert rid in capsys.readouterr().out


def test_store_from_environment(env, monkeypatch, capsys):
    monkeypatch.setenv("GMT_STORE", env["store"])
    args = env["run"][2:]
    assert main(args) == 0
    capsys.readouterr()
    assert main(["list"]) == 0
    assert len(run_ids(capsys.readouterr().out)) == 1


def test_compare_disjoint_exit_2(env, capsys, tmp_path):
    from gmt.metrics import PHASES, PhaseMarker, PhaseStats
    from gmt.store import RunRecord, Store
    assert main(env["run"]) == 0
    (rid,) = run_ids(capsys.readouterr().out)
    lone = RunRecord("29990101T000000000000Z-bbbbbb", "dz", "lone", "fp", "x", "y",
                     [PhaseMarker(p, i, i + 1) for i, p in enumerate(PHASES)],
                     [PhaseStats("boot", "temp_cpu", "gauge", "m°C", 1, n_samples=1, mean=1.0, min=1, max=1)])
    Store(env["store"]).save_run(lone)
    assert main(["--store", env["store"], "compare", rid, lone.run_id, "--json"]) == 2


def test_console_script_help():
    exe = shutil.which("gmt")
    cmd = [exe] if exe else [sys.executable, "-m", "gmt.cli"]
    res = subprocess.run(cmd + ["--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for name in ("run", "report", "compare", "calibrate", "preflight", "list", "serve", "verify-store"):
        assert name in res.stdout
