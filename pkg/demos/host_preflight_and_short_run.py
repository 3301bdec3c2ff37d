"""Preflight this host, then a short real-time run with the host's own reporters.

Checks are reported but not enforced (desk machines rarely pass all of
them). The workload is a two-second busy loop; baseline and idle last one
second each.

    python3 demos/host_preflight_and_short_run.py
"""
import os
import sys
import tempfile

from gmt import machine
from gmt.orchestrator import RunConfig, cmd_run
from gmt.reporters import available_reporters
from gmt.store import Store

SCENARIO = f"""\
name: busy
services: [{{name: app, image_or_command: "sleep 60", boot_ready: fixed-delay 200000}}]
flow:
  - name: spin
    service: app
    command: "{sys.executable} -c 'import time; e = time.time() + 2\\nwhile time.time() < e: pass'"
"""


def main():
    tmp = tempfile.mkdtemp(prefix="gmt-host-")
    for r in machine.run_preflight(machine.PreflightConfig(store_path=os.path.join(tmp, "store"))):
        print(f"{r.status:5} {r.check_id:18} {r.observed}  {r.message}")
    print("reporters available here:", ", ".join(available_reporters("/")))

    scen = os.path.join(tmp, "busy.gmt.yml")
    with open(scen, "w") as fh:
        fh.write(SCENARIO)
    cfg = RunConfig(scen, os.path.join(tmp, "store"), skip_checks=True, baseline_us=1_000_000, idle_us=1_000_000)
    (rid,) = cmd_run(cfg)
    rec = Store(cfg.store_path).load_run(rid)
    print(f"run {rid}: {rec.status}")
    for s in rec.stats:
        if s.metric_id == "cpu_util" and s.scope == "machine" and s.sub is None and s.mean is not None:
            print(f"  cpu {s.phase:13} mean {s.mean / 100:6.2f}%  ({s.n_samples} samples)")
    for w in rec.warnings:
        print("  warning:", w)


if __name__ == "__main__":
    main()
