import os
import textwrap

import pytest

from gmt.reporters import Sample, write_samples

TRIVIAL_SCENARIO = textwrap.dedent("""\
    name: demo
    services:
      - name: app
        image_or_command: "sleep 300"
        boot_ready: fixed-delay 1000000
        mem_limit: 1000000000
        build_steps: ["true"]
    flow:
      - {name: hit, service: app, command: "echo hi"}
      - {name: hit2, service: app, command: "true"}
""")

ACCEL = 200.0


def write_file(path, text):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)
    return path


def const_script(path, value, until_us=30_000_000, step_us=100_000, detail=None, accel=ACCEL):
    write_samples(str(path), [Sample(t, value, detail) for t in range(0, until_us + 1, step_us)], accel)
    return str(path)


def ramp_script(path, start, slope_per_s, until_us=30_000_000, step_us=100_000, detail=None, accel=ACCEL):
    rows = [Sample(t, start + slope_per_s * t // 1_000_000, detail) for t in range(0, until_us + 1, step_us)]
    write_samples(str(path), rows, accel)
    return str(path)


def build_fake_host(root, *, energy_uj=1_000_000, max_range=262_143_328_850, temps=(45_000, 47_000),
                    governor="performance", no_turbo="1", intr=1000, cpu=(100, 0, 50, 800, 50, 0, 0, 0)):
    """A procfs/sysfs tree under ``root`` with every source the samplers and checks read."""
    root = str(root)
    w = lambda rel, text: write_file(os.path.join(root, rel), text)  # noqa: E731
    w("proc/stat", "cpu  " + " ".join(map(str, cpu)) + "\n"
      "cpu0 " + " ".join(map(str, cpu)) + f"\nintr {intr} 0 0\nctxt 1\n")
    w("proc/meminfo", "MemTotal:        8000000 kB\nMemFree:         1000000 kB\n"
      "MemAvailable:    6000000 kB\n")
    w("proc/vmstat", "nr_free_pages 1\npgfault 500\npgmajfault 42\npgrefill 0\n")
    w("proc/diskstats", "   8       0 sda 10 0 100 0 20 0 300 0 0 0 0\n"
      "   8       1 sda1 5 0 50 0 10 0 150 0 0 0 0\n   7       0 loop0 1 0 999 0 1 0 999 0 0 0 0\n")
    w("proc/net/dev", "Inter-|   Receive |  Transmit\n face |bytes packets|bytes\n"
      "    lo: 1000 10 0 0 0 0 0 0 1000 10 0 0 0 0 0 0\n"
      "  eth0: 5000 50 0 0 0 0 0 0 7000 70 0 0 0 0 0 0\n")
    w("proc/cpuinfo", "processor\t: 0\nmodel name\t: Fake CPU 3000\n\nprocessor\t: 1\nmodel name\t: Fake CPU 3000\n")
    w("proc/sys/kernel/osrelease", "6.1.0-fake\n")
    os.makedirs(os.path.join(root, "sys/block/sda"), exist_ok=True)
    zone = "sys/class/powercap/intel-rapl:0"
    w(f"{zone}/name", "package-0\n")
    w(f"{zone}/energy_uj", f"{energy_uj}\n")
    w(f"{zone}/max_energy_range_uj", f"{max_range}\n")
    w("sys/class/powercap/intel-rapl:0:0/name", "core\n")
    w("sys/class/powercap/intel-rapl:0:0/energy_uj", "5\n")
    w("sys/class/hwmon/hwmon0/name", "coretemp\n")
    for i, t in enumerate(temps, start=1):
        w(f"sys/class/hwmon/hwmon0/temp{i}_input", f"{t}\n")
    for cpu_id in (0, 1):
        w(f"sys/devices/system/cpu/cpu{cpu_id}/cpufreq/scaling_governor", governor + "\n")
    if no_turbo is not None:
        w("sys/devices/system/cpu/intel_pstate/no_turbo", no_turbo + "\n")
    os.makedirs(os.path.join(root, "proc/1"), exist_ok=True)
    return root


@pytest.fixture
def fake_host(tmp_path):
    return build_fake_host(tmp_path / "host")


@pytest.fixture
def scenario_file(tmp_path):
    return write_file(str(tmp_path / "demo.gmt.yml"), TRIVIAL_SCENARIO)


@pytest.fixture
def mock_scripts(tmp_path):
    d = tmp_path / "scripts"
    d.mkdir()
    return {
        "machine_power": const_script(d / "power.script", 5_000),
        "mem_used.instance": const_script(d / "mem.script", 100_000_000, detail="app"),
        "cpu_util": const_script(d / "cpu.script", 2_500),
    }


def mock_config(scenario_path, store_path, scripts, **kw):
    from gmt.orchestrator import RunConfig

    base = dict(scenario_path=scenario_path, store_path=store_path, skip_checks=True, reporters=[],
                mock_scripts=scripts, baseline_us=3_000_000, idle_us=3_000_000, time_accel=ACCEL)
    base.update(kw)
    return RunConfig(**base)


def live_children(pid=None):
    """Non-zombie processes whose parent is ``pid`` (default: this process)."""
    pid = pid or os.getpid()
    out = []
    for entry in os.listdir("/proc"):
        if not entry.isdigit():
            continue
        try:
            with open(f"/proc/{entry}/stat", "rb") as fh:
                raw = fh.read()
        except OSError:
            continue
        f = raw[raw.rfind(b")") + 2:].split()
        if f[0] not in (b"Z", b"X") and int(f[1]) == pid:
            out.append(int(entry))
    return out


def strip_volatile(doc):
    """Run document minus run_id and wall-clock fields."""
    doc = dict(doc)
    for k in ("run_id", "started_at", "finished_at"):
        doc.pop(k)
    doc["recommendations"] = [{k: v for k, v in r.items() if k != "created_at"} for r in doc["recommendations"]]
    return doc


@pytest.fixture(scope="session")
def populated_store(tmp_path_factory):
    """Store with two completed runs of the demo scenario and one aborted run of another."""
    from gmt.orchestrator import cmd_run

    d = tmp_path_factory.mktemp("populated")
    scripts = {
        "machine_power": const_script(d / "power.script", 5_000),
        "mem_used.instance": const_script(d / "mem.script", 100_000_000, detail="app"),
        "cpu_util": const_script(d / "cpu.script", 2_500),
    }
    store = str(d / "store")
    demo = write_file(str(d / "demo.gmt.yml"), TRIVIAL_SCENARIO)
    ids = cmd_run(mock_config(demo, store, scripts, repetitions=2))
    broken = write_file(str(d / "broken.gmt.yml"),
                        TRIVIAL_SCENARIO.replace("name: demo", "name: broken").replace('["true"]', '["false"]'))
    ids += cmd_run(mock_config(broken, store, scripts))
    return {"path": store, "completed": ids[:2], "aborted": ids[2]}


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
