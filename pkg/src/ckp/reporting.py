"""CSV tables, plot-ready series and text validation reports.

Column selectors for :func:`export_table`::

    uid | status | pipeline | exploration
    choice:<key>          effective choice value
    functional:<key>      functional metric value
    <metric>:<statistic>  aggregate (min, max, mean, median, std, count)
"""
from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import dataclass
from typing import Any, Sequence

from ckp.errors import InvalidAxis, InvalidColumn, NotFound
from ckp.experiments import EXPLORATION, RECORD, ExperimentRecord, ValidationReport, load_report
from ckp.pipeline import STAT_NAMES, WALL_TIME
from ckp.store import Store

BUILTIN_COLUMNS = ("uid", "status", "pipeline", "exploration")


@dataclass
class PlotSeries:
    label: str
    x: list[Any]
    y: list[float]
    y_err: list[float] | None
    metadata: dict[str, Any]

    def __post_init__(self) -> None:
        if len(self.x) != len(self.y) or (self.y_err is not None and len(self.y_err) != len(self.y)):
            raise ValueError("x, y and y_err must have equal length")

    def to_json(self) -> dict[str, Any]:
        return {"label": self.label, "x": self.x, "y": self.y, "y_err": self.y_err,
                "metadata": self.metadata}


def find_records(store: Store, pattern: str = "*", tags: Sequence[str] = (),
                 exploration: str | None = None) -> list[ExperimentRecord]:
    """Experiment records (not reports or explorations) ordered by uid."""
    want = list(tags) + ([f"exploration-{exploration}"] if exploration else [])
    found = [ExperimentRecord.from_entry(e) for e in store.find_entries("experiment", pattern, want)
             if e.meta.get("type") == RECORD]
    return sorted(found, key=lambda r: r.uid)


def _check_column(col: str) -> None:
    if col in BUILTIN_COLUMNS:
        return
    head, sep, tail = col.partition(":")
    if sep and head and tail and (head in ("choice", "functional") or tail in STAT_NAMES):
        return
    raise InvalidColumn(f"unknown column selector {col!r}", column=col)


def _cell(rec: ExperimentRecord, col: str) -> Any:
    if col == "uid":
        return rec.uid
    if col == "status":
        return rec.status
    if col == "pipeline":
        return rec.meta.get("pipeline_ref")
    if col == "exploration":
        return rec.meta.get("exploration_id")
    head, _, tail = col.partition(":")
    if head == "choice":
        return rec.choices.get(tail)
    if head == "functional":
        return rec.functional.get(tail)
    return rec.aggregated.get(head, {}).get(tail)


def _text(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (dict, list)):
        return json.dumps(value, sort_keys=True)
    return str(value)


def default_columns(records: Sequence[ExperimentRecord]) -> list[str]:
    keys = sorted({k for r in records for k in r.choices})
    return ["uid", "status", *(f"choice:{k}" for k in keys), f"{WALL_TIME}:mean"]


def export_table(records: Sequence[ExperimentRecord], columns: Sequence[str] | None = None) -> str:
    columns = list(columns) if columns else default_columns(records)
    for col in columns:
        _check_column(col)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for rec in sorted(records, key=lambda r: r.uid):
        writer.writerow([_text(_cell(rec, c)) for c in columns])
    return buf.getvalue()


def export_plot_series(store: Store, exploration_id: str, x: str,
                       y: str = f"{WALL_TIME}:mean") -> list[PlotSeries]:
    entry = store.load(exploration_id if ":" in exploration_id else f"experiment:{exploration_id}")
    if entry.meta.get("type") != EXPLORATION:
        raise NotFound(f"{entry.uid_ref} is not an exploration", ref=exploration_id)
    dims = entry.meta["space"]["dimensions"]
    by_key = {d["key"]: d["values"] for d in dims}
    if x not in by_key:
        raise InvalidAxis(f"{x!r} is not a tuning dimension; have {sorted(by_key)}", axis=x)
    metric, _, stat = y.partition(":")
    stat = stat or "mean"
    if stat not in STAT_NAMES:
        raise InvalidColumn(f"unknown statistic {stat!r}", column=y)
    others = [d["key"] for d in dims if d["key"] != x]
    records = [r for r in find_records(store, exploration=entry.uid) if r.ok]

    series = []
    for combo in itertools.product(*(by_key[k] for k in others)):
        fixed = dict(zip(others, combo))
        members = [r for r in records if all(r.choices.get(k) == v for k, v in fixed.items())]
        pts = []
        for r in members:
            stats = r.aggregated.get(metric)
            if stats is None or r.choices.get(x) not in by_key[x]:
                continue
            pts.append((by_key[x].index(r.choices[x]), r.choices[x], stats[stat], stats.get("std")))
        if not pts:
            continue
        pts.sort(key=lambda p: p[0])
        label = ",".join(f"{k}={v}" for k, v in fixed.items()) or metric
        series.append(PlotSeries(
            label=label,
            x=[p[1] for p in pts],
            y=[p[2] for p in pts],
            y_err=[p[3] for p in pts] if all(p[3] is not None for p in pts) else None,
            metadata={"metric": metric, "statistic": stat,
                      "pipeline": entry.meta.get("pipeline_ref"), "fixed": fixed, "x": x},
        ))
    return series


def _fmt(value: Any) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def render_report(report: ValidationReport) -> str:
    lines = [
        "VALIDATION REPORT",
        f"reference: {report.reference_id}",
        f"replay:    {report.replay_id}",
        f"BADGE: {report.badge}",
        "",
        "METRICS",
        f"{'metric':<24} {'rule':<28} {'reference':>16} {'replay':>16} {'rel.diff':>10}  result",
    ]
    for row in report.rows:
        rel = row.get("relative_difference")
        lines.append(
            f"{row['metric']:<24} {row['rule']:<28} {_fmt(row['reference']):>16} "
            f"{_fmt(row['replay']):>16} {('-' if rel is None else f'{rel:+.4f}'):>10}  "
            f"{'PASS' if row['passed'] else 'FAIL'}")
    lines += ["", "ENVIRONMENT"]
    deps = report.environment_diff.get("dependencies", [])
    plat = report.environment_diff.get("platform", [])
    for d in deps:
        lines.append(f"CHANGED: {d['role']} ({d['soft_name']}) {d['field']}: "
                     f"{_fmt(d['reference'])} -> {_fmt(d['replay'])}")
    for p in plat:
        lines.append(f"CHANGED: platform {p['field']}: {_fmt(p['reference'])} -> {_fmt(p['replay'])}")
    if not deps and not plat:
        lines.append("unchanged")
    return "\n".join(lines) + "\n"


def render_validation_report(store: Store, report_id: str) -> str:
    return render_report(load_report(store, report_id))
