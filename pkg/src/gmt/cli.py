"""``gmt`` command line.

Exit codes: 0 success, 1 run aborted (or store problems), 2 usage error,
3 preflight failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import analysis, machine
from .advisor import load_provider_config
from .api import compare_stored, serve_api
from .orchestrator import ConfigError, PreflightFailed, RunConfig, cmd_run
from .report import load_series, render_compare_html, render_run_html, write_text
from .reporters import ReporterError, parse_reporter_id
from .scenario import ScenarioError
from .store import NotFound, SchemaVersionError, StorageError, Store

EXIT_OK, EXIT_ABORTED, EXIT_USAGE, EXIT_PREFLIGHT = 0, 1, 2, 3
STORE_ENV = "GMT_STORE"


class UsageError(Exception):
    pass


def _seconds_to_us(s: float) -> int:
    return int(round(s * 1e6))


def _pairs(items, what: str) -> dict[str, str]:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"{what} expects NAME=VALUE, got {item!r}")
        out[key] = value
    return out


def _print_checks(results) -> None:
    for r in results:
        print(f"{r.status.upper():5} {r.check_id:18} {r.observed} (threshold {r.threshold}) {r.message}")


def cmd_run_cli(args) -> int:
    options: dict[str, dict[str, str]] = {}
    for key, value in _pairs(args.reporter_option, "--reporter-option").items():
        metric, _, opt = key.partition(".")
        if not opt:
            raise UsageError(f"--reporter-option expects METRIC.OPTION=VALUE, got {key!r}")
        options.setdefault(metric, {})[opt] = value
    try:
        reporters = [parse_reporter_id(r) for r in args.reporter] if args.reporter else None
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.apply_cpu_settings:
        for path in machine.apply_cpu_settings(args.root):
            print(f"wrote {path}", file=sys.stderr)
    advisor_config = load_provider_config(args.advisor_config) if args.advisor_config else None
    rules = analysis.load_rule_config(args.rules) if args.rules else None
    config = RunConfig(
        scenario_path=args.scenario,
        store_path=args.store,
        backend_kind=args.backend,
        skip_checks=args.skip_checks,
        repetitions=args.repetitions,
        reporters=reporters,
        mock_scripts=_pairs(args.mock, "--mock"),
        reporter_options=options,
        advisor_enabled=args.advisor,
        advisor_config=advisor_config,
        annotations_path=args.annotations,
        advisor_mode=args.advisor_mode,
        baseline_us=_seconds_to_us(args.baseline_seconds),
        idle_us=_seconds_to_us(args.idle_seconds),
        time_accel=args.time_accel,
        continue_on_error=args.continue_on_error,
        rules=rules,
        root=args.root,
        engine=args.engine,
    )
    try:
        run_ids = cmd_run(config)
    except PreflightFailed as exc:
        _print_checks(exc.results)
        print(f"gmt: {exc}; fix the host or pass --skip-checks", file=sys.stderr)
        return EXIT_PREFLIGHT
    store = Store(args.store)
    code = EXIT_OK
    for rid in run_ids:
        rec = store.load_run(rid)
        line = f"{rid}\t{rec.status}"
        if rec.reason:
            line += f"\t{rec.reason}"
            code = EXIT_ABORTED
        print(line)
    return code


def cmd_report_cli(args) -> int:
    store = Store(args.store)
    rec = store.load_run(args.run_id)
    out = args.output or f"report-{args.run_id}.html"
    write_text(out, render_run_html(rec, load_series(store, rec)))
    print(out)
    return EXIT_OK


def cmd_compare_cli(args) -> int:
    store = Store(args.store)
    noise = [r for r in (args.noise or "").split(",") if r]
    cmp = compare_stored(store, args.run_a, args.run_b, noise)
    if args.json:
        print(json.dumps(cmp.to_dict(), sort_keys=True, indent=2, ensure_ascii=False))
        return EXIT_OK
    out = args.output or f"compare-{args.run_a}-{args.run_b}.html"
    write_text(out, render_compare_html(cmp, store.load_run(args.run_a), store.load_run(args.run_b)))
    print(out)
    print(f"{len(cmp.flagged)} of {len(cmp.rows)} rows flagged", file=sys.stderr)
    return EXIT_OK


def cmd_calibrate_cli(args) -> int:
    baseline = machine.calibrate(_seconds_to_us(args.seconds), store_path=args.store, root=args.root)
    print(json.dumps(baseline.to_dict(), sort_keys=True, indent=2))
    return EXIT_OK


def cmd_preflight_cli(args) -> int:
    checks = tuple(args.check) if args.check else machine.CHECKS
    unknown = [c for c in checks if c not in machine.CHECKS]
    if unknown:
        raise UsageError(f"unknown check(s): {', '.join(unknown)}")
    cfg = machine.PreflightConfig(root=args.root, store_path=args.store, checks=checks,
                                  temp_threshold=args.temp_threshold, irq_threshold=args.irq_threshold,
                                  container_cli=args.engine)
    results = machine.run_preflight(cfg)
    if args.json:
        print(json.dumps([r.to_dict() for r in results], sort_keys=True, indent=2))
    else:
        _print_checks(results)
    return EXIT_PREFLIGHT if machine.preflight_failed(results) else EXIT_OK


def cmd_list_cli(args) -> int:
    rows = Store(args.store).list_runs(args.scenario, args.digest, args.since, args.until)
    if args.json:
        print(json.dumps(rows, sort_keys=True, indent=2, ensure_ascii=False))
        return EXIT_OK
    for r in rows:
        print(f"{r['run_id']}\t{r['status']}\t{r['scenario_name']}\t{r['started_at']}")
    return EXIT_OK


def cmd_serve_cli(args) -> int:
    if not os.path.isdir(args.store):
        raise UsageError(f"store {args.store} does not exist")
    serve_api(args.store, args.host, args.port)
    return EXIT_OK


def cmd_verify_cli(args) -> int:
    problems = Store(args.store).verify()
    for p in problems:
        print(p)
    if not problems:
        print("store ok")
    return EXIT_ABORTED if problems else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gmt", description="Measure the resource and energy use of a software "
                                "scenario across its lifecycle phases.")
    p.add_argument("--store", default=os.environ.get(STORE_ENV, "gmt-store"),
                   help=f"run store directory (env {STORE_ENV}, default ./gmt-store)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    r = sub.add_parser("run", help="measure a usage scenario")
    r.add_argument("scenario", help="usage scenario YAML file")
    r.add_argument("--backend", choices=("process", "container"), default="process")
    r.add_argument("--engine", default="docker", help="container engine CLI (container backend)")
    r.add_argument("--repetitions", type=int, default=1, help="number of runs, 1..100")
    r.add_argument("--skip-checks", action="store_true", help="skip preflight checks")
    r.add_argument("--apply-cpu-settings", action="store_true",
                   help="disable turbo and set the performance governor before running (writes sysfs)")
    r.add_argument("--continue-on-error", action="store_true", help="keep going after a failed flow step")
    r.add_argument("--reporter", action="append", metavar="ID",
                   help="reporter to run, e.g. cpu_util or mem_used.instance (repeatable; default: all available)")
    r.add_argument("--reporter-option", action="append", metavar="METRIC.OPTION=VALUE",
                   help="reporter option, e.g. machine_power.path=/run/meter (repeatable)")
    r.add_argument("--mock", action="append", metavar="ID=SCRIPT", help="replace a reporter by a sample script")
    r.add_argument("--baseline-seconds", type=float, default=30.0, help="baseline phase length (default 30)")
    r.add_argument("--idle-seconds", type=float, default=30.0, help="idle phase length (default 30)")
    r.add_argument("--time-accel", type=float, metavar="FACTOR",
                   help="virtual time running FACTOR times faster; mock reporters only")
    r.add_argument("--rules", metavar="FILE", help="rule threshold overrides (YAML)")
    r.add_argument("--advisor", action="store_true", help="request code recommendations for flagged findings")
    r.add_argument("--advisor-config", metavar="FILE", help="provider config (YAML); default: offline stub")
    r.add_argument("--annotations", metavar="FILE", help="code segment annotations (YAML)")
    r.add_argument("--advisor-mode", choices=("improve", "rate"), default="improve")
    r.add_argument("--root", default="/", help=argparse.SUPPRESS)
    r.set_defaults(func=cmd_run_cli)

    rp = sub.add_parser("report", help="render a run as static HTML")
    rp.add_argument("run_id")
    rp.add_argument("-o", "--output", help="output file (default report-<run_id>.html)")
    rp.set_defaults(func=cmd_report_cli)

    c = sub.add_parser("compare", help="compare two runs")
    c.add_argument("run_a")
    c.add_argument("run_b")
    c.add_argument("-o", "--output", help="output file (default compare-<a>-<b>.html)")
    c.add_argument("--noise", metavar="ID,ID,...", help="repeated runs used to estimate per-metric noise")
    c.add_argument("--json", action="store_true", help="print the comparison as JSON instead")
    c.set_defaults(func=cmd_compare_cli)

    cal = sub.add_parser("calibrate", help="measure the idle host and store the baseline")
    cal.add_argument("--seconds", type=float, default=60.0, help="measurement length, at least 10 (default 60)")
    cal.add_argument("--root", default="/", help=argparse.SUPPRESS)
    cal.set_defaults(func=cmd_calibrate_cli)

    pf = sub.add_parser("preflight", help="check the host before measuring")
    pf.add_argument("--check", action="append", metavar="ID", help=f"run only these ({', '.join(machine.CHECKS)})")
    pf.add_argument("--temp-threshold", type=int, default=65_000, help="CPU temperature limit in m°C")
    pf.add_argument("--irq-threshold", type=float, default=2_000.0, help="interrupts per second limit")
    pf.add_argument("--engine", help="also look for labelled containers with this engine CLI")
    pf.add_argument("--json", action="store_true")
    pf.add_argument("--root", default="/", help=argparse.SUPPRESS)
    pf.set_defaults(func=cmd_preflight_cli)

    ls = sub.add_parser("list", help="list stored runs, newest first")
    ls.add_argument("--scenario", help="filter by scenario name")
    ls.add_argument("--digest", help="filter by scenario digest")
    ls.add_argument("--since", help="started at or after (ISO timestamp)")
    ls.add_argument("--until", help="started at or before (ISO timestamp)")
    ls.add_argument("--json", action="store_true")
    ls.set_defaults(func=cmd_list_cli)

    sv = sub.add_parser("serve", help="serve the read-only JSON API")
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--port", type=int, default=8080)
    sv.set_defaults(func=cmd_serve_cli)

    vs = sub.add_parser("verify-store", help="check the index against the run directories")
    vs.set_defaults(func=cmd_verify_cli)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ScenarioError, ReporterError, NotFound,
            analysis.NothingComparable, ValueError) as exc:
        print(f"gmt: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StorageError, SchemaVersionError, OSError) as exc:
        print(f"gmt: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
