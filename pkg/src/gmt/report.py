"""Self-contained HTML reports with inline SVG charts. No scripts, no external assets.

Output depends only on the run document and its raw sample files, so the
same run always renders to the same bytes.
"""
from __future__ import annotations

import html
import os
from typing import Mapping, Sequence

from .analysis import Comparison
from .metrics import ENERGY_METRIC, PHASES, PhaseMarker, PhaseStats, avg_power_mw, find_stats, unwrap
from .reporters import DESCRIPTORS, FormatError, Sample, read_samples, sample_file_name
from .store import RunRecord, Store

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2")
BAND_FILL = ("#f4f4f4", "#e8eef7")
W, H = 760, 220
ML, MR, MT, MB = 70, 20, 24, 36

CSS = """
body{font-family:sans-serif;margin:2em;color:#222}
table{border-collapse:collapse;margin:1em 0}
th,td{border:1px solid #ccc;padding:3px 8px;text-align:right}
th:first-child,td:first-child{text-align:left}
.worse{color:#b00020}.better{color:#1b7f3b}.muted{color:#888}
.sev-warn{color:#b36b00}.sev-critical{color:#b00020}.sev-info{color:#666}
pre{background:#f6f6f6;padding:.6em;overflow-x:auto}
svg{display:block;margin:.5em 0 1.5em 0}
"""


def esc(x) -> str:
    return html.escape(str(x), quote=True)


def human(value, unit: str) -> str:
    """Display form of a canonical-unit value."""
    if value is None:
        return "n/a"
    v = float(value)
    if unit == "µJ":
        return f"{v / 1e6:.3f} J"
    if unit == "mW":
        return f"{v / 1e3:.3f} W"
    if unit == "m°C":
        return f"{v / 1e3:.1f} °C"
    if unit == "centi-percent":
        return f"{v / 100:.2f} %"
    if unit == "bytes":
        return f"{v / 1048576:.2f} MiB"
    if unit == "µs":
        return f"{v / 1e6:.3f} s"
    return f"{v:.0f} {unit}" if v.is_integer() else f"{v:.2f} {unit}"


def _s(us: int) -> str:
    return f"{us / 1e6:.3f}"


def load_series(store: Store, record: RunRecord) -> dict[tuple[str, str], list[Sample]]:
    raw = os.path.join(store.run_dir(record.run_id), record.raw_dir)
    out = {}
    for metric_id, scope in sorted({(s.metric_id, s.scope) for s in record.stats if s.metric_id != ENERGY_METRIC}):
        path = os.path.join(raw, sample_file_name(metric_id, scope))
        try:
            out[(metric_id, scope)] = read_samples(path)
        except (OSError, FormatError):
            out[(metric_id, scope)] = []
    return out


def _plot_points(samples: Sequence[Sample], kind: str, wrap_max) -> list[tuple[int, float]]:
    if kind == "gauge":
        return [(s.t, float(s.value)) for s in samples]
    # counters are drawn as a rate per second between consecutive samples
    vals = unwrap([s.value for s in samples], wrap_max)
    pts = []
    for (a, va), (b, vb) in zip(zip((s.t for s in samples), vals), zip((s.t for s in samples[1:]), vals[1:])):
        if b > a:
            pts.append((b, (vb - va) * 1e6 / (b - a)))
    return pts


def svg_chart(title: str, series: Mapping[str | None, list[tuple[int, float]]], markers: Sequence[PhaseMarker],
              y_label: str) -> str:
    top = [m for m in markers if m.sub is None]
    all_pts = [p for pts in series.values() for p in pts]
    t_max = max([m.end for m in top] + [t for t, _ in all_pts] + [1])
    t_min = min([m.start for m in top] + [t for t, _ in all_pts] + [0])
    ys = [v for _, v in all_pts]
    lo, hi = (min(ys), max(ys)) if ys else (0.0, 1.0)
    if hi == lo:
        lo, hi = lo - 1.0, hi + 1.0
    pw, ph = W - ML - MR, H - MT - MB

    def x(t):
        return ML + (t - t_min) / (t_max - t_min or 1) * pw

    def y(v):
        return MT + ph - (v - lo) / (hi - lo) * ph

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
             f'role="img" aria-label="{esc(title)}">',
             f'<text x="{ML}" y="15" font-size="13" font-weight="bold">{esc(title)}</text>']
    for i, m in enumerate(top):
        parts.append(f'<rect x="{x(m.start):.1f}" y="{MT}" width="{max(x(m.end) - x(m.start), 0.5):.1f}" '
                     f'height="{ph}" fill="{BAND_FILL[i % 2]}"/>')
        parts.append(f'<text x="{x(m.start) + 2:.1f}" y="{MT + 11}" font-size="9" fill="#666">{esc(m.phase)}</text>')
    parts.append(f'<line x1="{ML}" y1="{MT + ph}" x2="{ML + pw}" y2="{MT + ph}" stroke="#444"/>')
    parts.append(f'<line x1="{ML}" y1="{MT}" x2="{ML}" y2="{MT + ph}" stroke="#444"/>')
    for frac in (0.0, 0.5, 1.0):
        v = lo + (hi - lo) * frac
        parts.append(f'<text x="{ML - 4}" y="{y(v) + 3:.1f}" font-size="9" text-anchor="end">{v:.4g}</text>')
        t = t_min + (t_max - t_min) * frac
        parts.append(f'<text x="{x(t):.1f}" y="{H - 20}" font-size="9" text-anchor="middle">{t / 1e6:.1f}s</text>')
    parts.append(f'<text x="{ML + pw}" y="{H - 6}" font-size="9" text-anchor="end">{esc(y_label)}</text>')
    if not all_pts:
        parts.append(f'<text x="{ML + pw / 2:.1f}" y="{MT + ph / 2:.1f}" font-size="12" text-anchor="middle" '
                     f'fill="#888">no samples</text>')
    for i, (detail, pts) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        if len(pts) == 1:
            (t, v), = pts
            parts.append(f'<circle cx="{x(t):.1f}" cy="{y(v):.1f}" r="2" fill="{color}"/>')
        elif pts:
            coords = " ".join(f"{x(t):.1f},{y(v):.1f}" for t, v in pts)
            parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{coords}"/>')
        if detail is not None:
            parts.append(f'<text x="{ML + 8 + 90 * i}" y="{H - 6}" font-size="9" fill="{color}">{esc(detail)}</text>')
    parts.append("</svg>")
    return "".join(parts)


def _phase_table(record: RunRecord) -> str:
    top = {m.phase: m for m in record.markers if m.sub is None}
    rows = ["<table><tr><th>phase</th><th>start (s)</th><th>end (s)</th><th>duration (s)</th>"
            "<th>energy</th><th>avg power</th><th>cpu (machine, mean)</th></tr>"]
    for phase in PHASES:
        m = top.get(phase)
        if m is None:
            rows.append(f'<tr><td>{phase}</td><td colspan="6" class="muted">not reached</td></tr>')
            continue
        energy = find_stats(record.stats, phase, ENERGY_METRIC, "machine")
        cpu = find_stats(record.stats, phase, "cpu_util", "machine")
        rows.append(f"<tr><td>{phase}</td><td>{_s(m.start)}</td><td>{_s(m.end)}</td><td>{_s(m.end - m.start)}</td>"
                    f"<td>{human(energy[0].energy_total if energy else None, 'µJ')}</td>"
                    f"<td>{human(avg_power_mw(record.stats, phase), 'mW')}</td>"
                    f"<td>{human(cpu[0].mean if cpu else None, 'centi-percent')}</td></tr>")
    rows.append("</table>")
    return "".join(rows)


def _step_table(record: RunRecord) -> str:
    steps = [m for m in record.markers if m.sub is not None]
    if not steps:
        return "<p>none</p>"
    rows = ["<table><tr><th>step</th><th>duration (s)</th><th>energy</th><th>cpu (machine, mean)</th></tr>"]
    for m in steps:
        energy = find_stats(record.stats, m.phase, ENERGY_METRIC, "machine", sub=m.sub)
        cpu = find_stats(record.stats, m.phase, "cpu_util", "machine", sub=m.sub)
        rows.append(f"<tr><td>{esc(m.sub)}</td><td>{_s(m.end - m.start)}</td>"
                    f"<td>{human(energy[0].energy_total if energy else None, 'µJ')}</td>"
                    f"<td>{human(cpu[0].mean if cpu else None, 'centi-percent')}</td></tr>")
    rows.append("</table>")
    return "".join(rows)


def _metric_table(record: RunRecord) -> str:
    keys = sorted({(s.metric_id, s.scope, s.detail or "") for s in record.stats if s.sub is None})
    if not keys:
        return "<p>none</p>"
    by_key: dict[tuple, dict[str, PhaseStats]] = {}
    for s in record.stats:
        if s.sub is None:
            by_key.setdefault((s.metric_id, s.scope, s.detail or ""), {})[s.phase] = s
    head = "".join(f"<th>{p}</th>" for p in PHASES)
    rows = [f"<table><tr><th>metric</th><th>scope</th><th>detail</th><th>kind</th>{head}</tr>"]
    for key in keys:
        cells = by_key[key]
        kind = next(iter(cells.values())).kind
        unit = next(iter(cells.values())).unit
        vals = "".join(f"<td>{human(cells[p].value, unit) if p in cells else 'n/a'}</td>" for p in PHASES)
        label = "total" if kind == "counter" else "mean"
        rows.append(f"<tr><td>{esc(key[0])}</td><td>{esc(key[1])}</td><td>{esc(key[2])}</td>"
                    f"<td>{label}</td>{vals}</tr>")
    rows.append("</table>")
    return "".join(rows)


def _findings(record: RunRecord) -> str:
    if not record.findings:
        return "<p>none</p>"
    items = []
    for f in record.findings:
        items.append(f'<li class="sev-{esc(f.severity)}"><b>{esc(f.rule_id)}</b> [{esc(f.severity)}] '
                     f"{esc(f.phase)}: {esc(f.message)}</li>")
    return "<ul>" + "".join(items) + "</ul>"


def _recommendations(record: RunRecord) -> str:
    if not record.recommendations:
        return "<p>none</p>"
    out = []
    for r in record.recommendations:
        seg = r.segment
        rating = f", rating {r.rating}/10" if r.rating is not None else ""
        out.append(f"<h3>{esc(seg.source_path)} lines {seg.line_range[0]}-{seg.line_range[1]} "
                   f"({esc(r.mode)}, {esc(r.provider_id)}{rating})</h3>"
                   f"<details><summary>prompt</summary><pre>{esc(r.prompt)}</pre></details>"
                   f"<pre>{esc(r.response)}</pre>")
    return "".join(out)


def render_run_html(record: RunRecord, series: Mapping[tuple[str, str], Sequence[Sample]]) -> str:
    charts = []
    for (metric_id, scope) in sorted(series):
        desc = DESCRIPTORS.get(metric_id)
        kind = desc.kind if desc else "gauge"
        samples = sorted(series[(metric_id, scope)], key=lambda s: (s.detail or "", s.t))
        by_detail: dict[str | None, list[Sample]] = {}
        for s in samples:
            by_detail.setdefault(s.detail, []).append(s)
        unit = desc.unit if desc else ""
        pts = {d: _plot_points(v, kind, desc.wrap_max if desc else None) for d, v in sorted(
            by_detail.items(), key=lambda kv: kv[0] or "")}
        label = f"{unit}/s" if kind == "counter" else unit
        charts.append(svg_chart(f"{metric_id} ({scope})", pts, record.markers, label))
    warn = "".join(f"<li>{esc(w)}</li>" for w in record.warnings)
    unassigned = "".join(f"<li>{esc(k)}: {v} sample(s) outside every phase</li>"
                         for k, v in sorted(record.unassigned.items()))
    reason = f" ({esc(record.reason)})" if record.reason else ""
    quality = f"<h2>Data quality</h2><ul>{warn}{unassigned}</ul>" if (warn or unassigned) else ""
    return (
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">"
        f"<title>run {esc(record.run_id)}</title><style>{CSS}</style></head><body>"
        f"<h1>{esc(record.scenario_name)}: run {esc(record.run_id)}</h1>"
        f"<p>status <b>{esc(record.status)}</b>{reason}<br>scenario digest <code>{esc(record.scenario_digest)}</code>"
        f"<br>machine {esc(record.machine_fingerprint)}<br>started {esc(record.started_at)}, "
        f"finished {esc(record.finished_at)}</p>"
        f"<h2>Phases</h2>{_phase_table(record)}"
        f"<h2>Flow steps</h2>{_step_table(record)}"
        f"<h2>Metrics by phase</h2>{_metric_table(record)}"
        f"<h2>Time series</h2>{''.join(charts) or '<p>none</p>'}"
        f"<h2>Findings</h2>{_findings(record)}"
        f"{quality}<h2>Recommendations</h2>{_recommendations(record)}</body></html>\n"
    )


def render_compare_html(cmp: Comparison, rec_a: RunRecord | None = None, rec_b: RunRecord | None = None) -> str:
    rule = ("flagged when |Δ| exceeds 2× the relative stddev of repeated runs (at least 1%); "
            "a 2-sigma heuristic, not a significance test") if cmp.noise_used else \
        "flagged when |Δ| exceeds 5% (no repeated-run noise data supplied)"
    rows = ["<table><tr><th>phase</th><th>step</th><th>metric</th><th>scope</th><th>detail</th>"
            "<th>A</th><th>B</th><th>Δ</th><th>flag</th></tr>"]
    for r in cmp.rows:
        if r.rel_delta is None:
            delta, cls = "n/a", "muted"
        else:
            delta = f"{r.rel_delta:+.2f}%"
            # more of a resource is worse, except IPC where higher is better
            up_is_bad = r.metric_id != "ipc_proxy"
            cls = "" if r.rel_delta == 0 else ("worse" if (r.rel_delta > 0) == up_is_bad else "better")
        flag = "⚠" if r.flagged else ""
        rows.append(f"<tr><td>{esc(r.phase)}</td><td>{esc(r.sub or '')}</td><td>{esc(r.metric_id)}</td>"
                    f"<td>{esc(r.scope)}</td><td>{esc(r.detail or '')}</td>"
                    f"<td>{human(r.value_a, r.unit)}</td><td>{human(r.value_b, r.unit)}</td>"
                    f'<td class="{cls}">{delta}</td><td>{flag}</td></tr>')
    rows.append("</table>")
    warn = "".join(f"<li>{esc(w)}</li>" for w in cmp.warnings)
    names = ""
    if rec_a is not None and rec_b is not None:
        names = (f"<p>A: {esc(rec_a.scenario_name)} ({esc(rec_a.started_at)})<br>"
                 f"B: {esc(rec_b.scenario_name)} ({esc(rec_b.started_at)})</p>")
    return ("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">"
            f"<title>compare {esc(cmp.run_a)} {esc(cmp.run_b)}</title><style>{CSS}</style></head><body>"
            f"<h1>Run comparison</h1><p>A = <code>{esc(cmp.run_a)}</code>, B = <code>{esc(cmp.run_b)}</code>; "
            f"Δ = (B − A) / A</p>{names}<p>{esc(rule)}</p>"
            + (f"<ul>{warn}</ul>" if warn else "")
            + f"<p>{len(cmp.flagged)} of {len(cmp.rows)} rows flagged</p>"
            + "".join(rows) + "</body></html>\n")


def write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
