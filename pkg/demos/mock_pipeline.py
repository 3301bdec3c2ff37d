"""End-to-end run in virtual time with scripted reporters.

Nothing here depends on the host's sensors: the power, memory and CPU
readings come from sample scripts, and the clock runs 200x faster than
wall time. Output: run id, phase table, findings and an HTML report.

    python3 demos/mock_pipeline.py [--out DIR]
"""
import argparse
import os
import tempfile

from gmt.orchestrator import RunConfig, cmd_run
from gmt.report import load_series, render_run_html, write_text
from gmt.reporters import Sample, write_samples
from gmt.store import Store

ACCEL = 200.0

SCENARIO = """\
name: mock-demo
services:
  - name: app
    image_or_command: "sleep 300"
    boot_ready: fixed-delay 2000000
    mem_limit: 1000000000
    build_steps: ["true"]
flow:
  - {name: fetch, service: app, command: "echo fetching"}
  - {name: crunch, service: app, command: "true"}
"""


def script(path, fn, until_us=60_000_000, step_us=100_000, detail=None):
    write_samples(path, [Sample(t, fn(t), detail) for t in range(0, until_us + 1, step_us)], ACCEL)
    return path


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=tempfile.mkdtemp(prefix="gmt-demo-"))
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    scen = os.path.join(args.out, "demo.gmt.yml")
    with open(scen, "w") as fh:
        fh.write(SCENARIO)

    # power steps up once the app boots (t > 7 s), memory stays low
    mocks = {
        "machine_power": script(os.path.join(args.out, "power.script"), lambda t: 4_000 if t < 7_000_000 else 9_000),
        "mem_used.instance": script(os.path.join(args.out, "mem.script"), lambda t: 120_000_000, detail="app"),
        "cpu_util": script(os.path.join(args.out, "cpu.script"), lambda t: 500 + (t // 1_000_000) * 10),
    }
    store_path = os.path.join(args.out, "store")
    cfg = RunConfig(scen, store_path, skip_checks=True, reporters=[], mock_scripts=mocks,
                    baseline_us=5_000_000, idle_us=5_000_000, time_accel=ACCEL)
    (run_id,) = cmd_run(cfg)
    store = Store(store_path)
    rec = store.load_run(run_id)

    print(f"run {run_id}: {rec.status}")
    for m in rec.markers:
        label = m.phase if m.sub is None else f"  {m.phase}:{m.sub}"
        print(f"{label:20} {m.start / 1e6:8.3f}s .. {m.end / 1e6:8.3f}s")
    print("energy per phase:")
    for s in rec.stats:
        if s.metric_id == "energy" and s.sub is None:
            print(f"  {s.phase:13} {s.energy_total / 1e6:9.3f} J  ({s.energy_source})")
    print("findings:")
    for f in rec.findings:
        print(f"  {f.rule_id} [{f.severity}] {f.message}")
    out = os.path.join(args.out, "report.html")
    write_text(out, render_run_html(rec, load_series(store, rec)))
    print(f"report: {out}")


if __name__ == "__main__":
    main()
