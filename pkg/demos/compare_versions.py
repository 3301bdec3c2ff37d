"""Two versions of the same service, compared with and without noise data.

Version B draws about 8% less power once it is deployed. Three repeated runs of
version A give the per-metric noise, which tightens or loosens each flag
threshold. Scripts and virtual time keep the demo host-independent.

    python3 demos/compare_versions.py
"""
import os
import random
import tempfile

from gmt.api import compare_stored
from gmt.orchestrator import RunConfig, cmd_run
from gmt.reporters import Sample, write_samples

ACCEL = 200.0
SCENARIO = """\
name: versions
services: [{name: app, image_or_command: "sleep 300", boot_ready: fixed-delay 1000000}]
flow: [{name: work, service: app, command: "true"}]
"""


def power_script(path, runtime_mw, seed):
    rng = random.Random(seed)
    rows = [Sample(t, (runtime_mw if t > 5_000_000 else 4_000) + rng.randint(-50, 50))
            for t in range(0, 30_000_001, 100_000)]
    write_samples(path, rows, ACCEL)
    return path


def run(tmp, store, runtime_mw, seed):
    mocks = {"machine_power": power_script(os.path.join(tmp, f"p{seed}.script"), runtime_mw, seed)}
    cfg = RunConfig(os.path.join(tmp, "s.gmt.yml"), store, skip_checks=True, reporters=[], mock_scripts=mocks,
                    baseline_us=2_000_000, idle_us=2_000_000, time_accel=ACCEL)
    return cmd_run(cfg)[0]


def main():
    tmp = tempfile.mkdtemp(prefix="gmt-compare-")
    with open(os.path.join(tmp, "s.gmt.yml"), "w") as fh:
        fh.write(SCENARIO)
    store = os.path.join(tmp, "store")
    a_runs = [run(tmp, store, 10_000, seed) for seed in (1, 2, 3)]
    b = run(tmp, store, 9_200, 4)

    from gmt.store import Store
    st = Store(store)
    for label, noise in (("fixed 5% rule", []), ("noise from 3 runs of A", a_runs)):
        cmp = compare_stored(st, a_runs[0], b, noise)
        print(f"-- {label}: {len(cmp.flagged)} of {len(cmp.rows)} rows flagged")
        for r in cmp.rows:
            if r.sub is None and r.metric_id in ("energy", "machine_power"):
                delta = "n/a" if r.rel_delta is None else f"{r.rel_delta:+6.2f}%"
                print(f"   {r.phase:13} {r.metric_id:14} {delta:>8}  threshold {r.threshold_pct:5.2f}%"
                      f"  {'FLAG' if r.flagged else ''}")


if __name__ == "__main__":
    main()
