"""Learning-curve comparison tables and SVG plots.

Curves come from metrics CSVs (mAP in [0, 1], shown as percent) and from an
optional reference CSV of published numbers with columns
``series,round,percent,mAP``. Reference series are named ``group/strategy``
(for example ``PV-RCNN/entropy``); deltas are computed against the
``random`` series of the same group. Rows with an empty ``round`` are
full-data results and render as horizontal asymptotes.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .formats import DataError, read_metrics_csv

log = logging.getLogger(__name__)

BASELINE = "random"


@dataclass
class Curve:
    name: str
    group: str
    strategy: str
    points: dict[int, tuple[float, float]]  # round -> (percent labeled, mAP in percent)


@dataclass
class Asymptote:
    group: str
    percent: float
    value: float


@dataclass
class ComparisonTable:
    columns: list[str]
    rows: list[list[str]]
    warnings: list[str] = field(default_factory=list)

    def to_markdown(self) -> str:
        lines = ["| " + " | ".join(self.columns) + " |",
                 "|" + "|".join("---" for _ in self.columns) + "|"]
        lines += ["| " + " | ".join(r) + " |" for r in self.rows]
        return "\n".join(lines) + "\n"

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            w.writerows(self.rows)


def format_delta(delta: float) -> str:
    # round first so -0.004 prints as +0.00 rather than -0.00
    r = round(delta, 2)
    return f"{r:+.2f}" if r != 0 else "+0.00"


def curve_from_metrics(path) -> Curve:
    rows = read_metrics_csv(path)
    strategy = rows[0]["strategy"]
    # metrics rounds are 0-based; tables count rounds from 1
    pts = {r["round"] + 1: (100.0 * r["labeled_fraction"], 100.0 * r["mAP"]) for r in rows}
    return Curve(strategy, "run", strategy, pts)


def read_reference(path) -> tuple[list[Curve], list[Asymptote]]:
    curves: dict[str, Curve] = {}
    asymptotes = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"series", "round", "percent", "mAP"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise DataError(f"reference CSV needs columns {sorted(need)}", path)
        for lineno, r in enumerate(reader, start=2):
            series = r["series"].strip()
            group, _, strategy = series.rpartition("/")
            group = group or "reference"
            value = r["mAP"].strip()
            if value in ("", "-"):
                continue
            try:
                v = float(value)
                pct = float(r["percent"])
            except ValueError as exc:
                raise DataError(f"bad number: {exc}", path, lineno) from exc
            if r["round"].strip() == "":
                asymptotes.append(Asymptote(group, pct, v))
                continue
            c = curves.setdefault(series, Curve(series, group, strategy, {}))
            c.points[int(r["round"])] = (pct, v)
    return list(curves.values()), asymptotes


def build_table(curves: Sequence[Curve], asymptotes: Sequence[Asymptote] = ()) -> ComparisonTable:
    """One row per round; each non-baseline curve gets a delta against its group's baseline."""
    if not curves:
        raise ValueError("need at least one curve")
    warnings = []
    run_sets = [set(c.points) for c in curves if c.group == "run"]
    rounds = set().union(*(set(c.points) for c in curves if c.group != "run"))
    if run_sets:
        common = set.intersection(*run_sets)
        if common != set.union(*run_sets):
            msg = "curves cover different rounds; aligning on the intersection"
            log.warning(msg)
            warnings.append(msg)
        rounds |= common
    baselines = {c.group: c for c in curves if c.strategy == BASELINE}
    with_delta = len(curves) > 1
    columns = ["round", "percent"]
    for c in curves:
        columns.append(c.name)
        if with_delta and c.strategy != BASELINE and c.group in baselines:
            columns.append(f"{c.name} (+/-)")
    rows = []
    for t in sorted(rounds):
        pct = next((c.points[t][0] for c in curves if t in c.points), math.nan)
        row = [str(t), f"{pct:g}"]
        for c in curves:
            v = c.points.get(t)
            row.append(f"{v[1]:.2f}" if v else "-")
            if with_delta and c.strategy != BASELINE and c.group in baselines:
                base = baselines[c.group].points.get(t)
                row.append(format_delta(v[1] - base[1]) if v and base else "")
        rows.append(row)
    for a in asymptotes:
        row = ["full", f"{a.percent:g}"]
        for c in curves:
            row.append(f"{a.value:.2f}" if c.group == a.group else "")
            if with_delta and c.strategy != BASELINE and c.group in baselines:
                row.append("")
        rows.append(row)
    return ComparisonTable(columns, rows, warnings)


def render_svg(curves: Sequence[Curve], asymptotes: Sequence[Asymptote], path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.fonttype"] = "none"  # keep labels as text
    plt.rcParams["svg.hashsalt"] = "activeloop"
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for c in curves:
        pts = sorted(c.points.values())
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=c.name)
    for a in asymptotes:
        line = ax.axhline(a.value, linestyle="--", linewidth=1, color="gray")
        ax.annotate(f"{a.group} full data: {a.value:.2f}", xy=(0.01, a.value),
                    xycoords=("axes fraction", "data"), va="bottom", fontsize=8,
                    color=line.get_color())
    ax.set_xlabel("labeled pool (%)")
    ax.set_ylabel("mAP (%)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def make_report(metrics_paths: Sequence, out_dir, reference=None) -> ComparisonTable:
    curves = [curve_from_metrics(p) for p in metrics_paths]
    asymptotes = []
    if reference is not None:
        ref_curves, asymptotes = read_reference(reference)
        curves += ref_curves
    if not curves:
        raise ValueError("need at least one curve")
    table = build_table(curves, asymptotes)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.md").write_text(table.to_markdown())
    table.write_csv(out / "report.csv")
    render_svg(curves, asymptotes, out / "learning_curves.svg")
    return table
