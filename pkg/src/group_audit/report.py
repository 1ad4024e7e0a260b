"""Figures and tables for audit results.

Figures are matplotlib SVGs rendered with a fixed hash salt, text kept as
text and no timestamp, so identical inputs give identical bytes. Circle
and point artists carry ``gid`` tags (``present-<row>-<col>``,
``absent-<row>-<col>``, ``point-<i>``) that survive into the SVG.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import numpy as np
import pandas as pd
from matplotlib.figure import Figure

from .domain import AuditError, DataError, GroupStats
from .ingest import IoError, write_table

SVG_RC = {
    "svg.hashsalt": "group-audit",
    "svg.fonttype": "none",
    "font.family": "DejaVu Sans",
    "font.size": 9,
    "axes.unicode_minus": False,
}


class EmptyInput(AuditError):
    pass


def format_dollars(value: float) -> str:
    """``-5000.4`` -> ``"-5,000"``; thousands separators, no currency sign."""
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    out = f"{value:,.0f}"
    return "0" if out == "-0" else out


def _save(fig: Figure, path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with matplotlib.rc_context(SVG_RC):
            fig.savefig(path, format="svg", metadata={"Date": None})
    except OSError as exc:
        raise IoError(f"{path}: {exc}") from None


def _split_sections(top_groups):
    if isinstance(top_groups, tuple) and len(top_groups) == 2 and all(isinstance(x, list) for x in top_groups):
        return list(top_groups[0]), list(top_groups[1])
    groups = list(top_groups)
    under = [g for g in groups if g.overall_mean_predicted_residual < 0]
    over = [g for g in groups if g.overall_mean_predicted_residual >= 0]
    return under, over


def dot_plot(top_groups, component_labels: Sequence[str], path, title: str | None = None) -> None:
    """Dot plot of groups: filled circle = present, unfilled = absent.

    ``top_groups`` is either the ``(under, over)`` pair returned by
    :func:`group_audit.aggregate.rank` or a flat list of GroupStats.
    """
    under, over = _split_sections(top_groups)
    groups = under + over
    if not groups:
        raise EmptyInput("dot_plot needs at least one group")
    cols = sorted({i for g in groups for i in g.signature.indices})
    col_of = {c: j for j, c in enumerate(cols)}
    n_rows, n_cols = len(groups), len(cols)
    gap = 1 if under and over else 0
    ypos = [i for i in range(len(under))] + [len(under) + gap + i for i in range(len(over))]
    height = len(ypos) + gap

    with matplotlib.rc_context(SVG_RC):
        fig = Figure(figsize=(2.5 + 0.45 * n_cols + 3.0, 1.6 + 0.32 * height))
        grid = fig.add_gridspec(1, 2, width_ratios=[max(n_cols, 1) * 0.45, 3.0], wspace=0.05)
        ax = fig.add_subplot(grid[0, 0])
        bar = fig.add_subplot(grid[0, 1], sharey=ax)

        for row, (g, y) in enumerate(zip(groups, ypos)):
            for c, present in g.signature:
                (dot,) = ax.plot([col_of[c]], [y], marker="o", markersize=9, linestyle="none",
                                 markerfacecolor="black" if present else "white",
                                 markeredgecolor="black", markeredgewidth=1.0)
                dot.set_gid(f"{'present' if present else 'absent'}-{row}-{c}")
        ax.set_xlim(-0.6, n_cols - 0.4)
        ax.set_ylim(height - 0.4, -0.6)
        ax.set_xticks(range(n_cols))
        ax.set_xticklabels([component_labels[c] for c in cols], rotation=60, ha="left")
        ax.xaxis.tick_top()
        ax.set_yticks(ypos)
        ax.set_yticklabels([f"G{i + 1}" for i in range(n_rows)])
        for side in ("right", "bottom"):
            ax.spines[side].set_visible(False)

        values = [g.overall_mean_predicted_residual for g in groups]
        colors = ["#b2182b" if v < 0 else "#2166ac" for v in values]
        bar.barh(ypos, values, color=colors, height=0.6)
        bar.axvline(0.0, color="black", linewidth=0.8)
        span = max(abs(v) for v in values) or 1.0
        bar.set_xlim(-1.35 * span if under else -0.1 * span, 1.35 * span if over else 0.1 * span)
        for row, (v, y) in enumerate(zip(values, ypos)):
            label = bar.text(v, y, f" {format_dollars(v)} " if v >= 0 else f"{format_dollars(v)} ",
                             va="center", ha="left" if v >= 0 else "right")
            label.set_gid(f"value-{row}")
        if gap:
            divider = len(under) + (gap - 1) / 2.0
            for a in (ax, bar):
                a.axhline(divider, color="grey", linewidth=0.6, linestyle="--")
        bar.set_xlabel("Mean predicted residual ($)")
        bar.tick_params(axis="y", left=False, labelleft=False)
        if under:
            bar.text(0.02, -0.02, "Undercompensated", transform=bar.transAxes, va="bottom")
        if over:
            bar.text(0.98, -0.02, "Overcompensated", transform=bar.transAxes, va="bottom", ha="right")
        fig.text(0.01, 0.01, "Filled: condition present. Unfilled: condition absent.", fontsize=7)
        if title:
            fig.suptitle(title)
    _save(fig, path)


def scatter_obs_vs_pred(top_groups, path, title: str | None = None) -> int:
    """Observed vs predicted mean residual, one point per group-year.

    Returns the number of points drawn.
    """
    under, over = _split_sections(top_groups)
    points = []
    for g in under + over:
        for year, ys in sorted(g.per_year.items()):
            if math.isfinite(ys.mean_predicted_residual) and math.isfinite(ys.observed_mean_residual):
                points.append((ys.mean_predicted_residual, ys.observed_mean_residual))
    if not points:
        raise EmptyInput("scatter_obs_vs_pred needs groups with observed and predicted means")
    xs, ys_ = np.array(points).T
    lo = float(min(xs.min(), ys_.min()))
    hi = float(max(xs.max(), ys_.max()))
    pad = 0.05 * (hi - lo) or 1.0
    lo, hi = lo - pad, hi + pad

    with matplotlib.rc_context(SVG_RC):
        fig = Figure(figsize=(5.0, 5.0))
        ax = fig.add_subplot(1, 1, 1)
        (identity,) = ax.plot([lo, hi], [lo, hi], color="grey", linewidth=0.8, linestyle="--")
        identity.set_gid("identity")
        for i, (x, y) in enumerate(points):
            (pt,) = ax.plot([x], [y], marker="o", linestyle="none", color="#b2182b" if x < 0 else "#2166ac")
            pt.set_gid(f"point-{i}")
        ax.set_xlim(lo, hi)
        ax.set_ylim(lo, hi)
        ax.set_aspect("equal")
        ax.set_xlabel("Predicted mean residual ($)")
        ax.set_ylabel("Observed mean residual ($)")
        if title:
            ax.set_title(title)
    _save(fig, path)
    return len(points)


def render_text(df: pd.DataFrame) -> str:
    """Aligned plain-text table: first column left-aligned, others right."""
    cells = [[str(c) for c in df.columns]] + [[_cell(v) for v in row] for row in df.itertuples(index=False)]
    widths = [max(len(r[j]) for r in cells) for j in range(len(df.columns))]
    lines = []
    for k, r in enumerate(cells):
        parts = [r[0].ljust(widths[0])] + [v.rjust(w) for v, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(parts).rstrip())
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _cell(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else f"{v:g}" if abs(v) < 1 else f"{v:,.1f}"
    return str(v)


def prevalence_table(report: pd.DataFrame) -> pd.DataFrame:
    """Wide percent table (component x year) from a prevalence report."""
    if report.empty:
        raise EmptyInput("empty prevalence report")
    order = list(dict.fromkeys(report["component"]))
    wide = report.pivot(index="component", columns="year", values="prevalence").loc[order]
    wide = (100.0 * wide).round(1)
    wide.columns = [str(c) for c in wide.columns]
    out = wide.reset_index()
    n_row = {"component": "N", **{str(y): f"{n:,}" for y, n in report.groupby("year")["n"].first().items()}}
    out = out.astype({c: object for c in out.columns[1:]})
    out.loc[len(out)] = n_row
    return out


def residual_table(by_year: Mapping[int, pd.DataFrame]) -> pd.DataFrame:
    """Wide dollar table: condition x (year, absent/present) mean residual."""
    if not by_year:
        raise EmptyInput("no residual tables given")
    years = sorted(by_year)
    out = pd.DataFrame({"condition": by_year[years[0]]["condition"].to_list()})
    for y in years:
        df = by_year[y]
        out[f"{y}_no"] = [format_dollars(v) for v in df["mean_absent"]]
        out[f"{y}_yes"] = [format_dollars(v) for v in df["mean_present"]]
    return out


def write_table_pair(df: pd.DataFrame, stem) -> tuple[Path, Path]:
    """Write ``stem.csv`` and the aligned ``stem.txt``."""
    stem = Path(stem)
    csv_path, txt_path = stem.with_suffix(".csv"), stem.with_suffix(".txt")
    write_table(csv_path, df)
    try:
        txt_path.write_text(render_text(df))
    except OSError as exc:
        raise IoError(f"{txt_path}: {exc}") from None
    return csv_path, txt_path


def group_table(groups: Sequence[GroupStats], labels: Sequence[str], years: Sequence[int]) -> pd.DataFrame:
    """Human-readable ranking table for the top groups."""
    rows = []
    for g in groups:
        row = {"group": g.signature.encode(labels)}
        for y in years:
            ys = g.per_year.get(y)
            row[f"trees_{y}"] = f"{ys.tree_fraction:.3f}" if ys else "0.000"
            row[f"pred_{y}"] = format_dollars(ys.mean_predicted_residual) if ys else ""
            row[f"obs_{y}"] = format_dollars(ys.observed_mean_residual) if ys else ""
        row["mean_pred"] = format_dollars(g.overall_mean_predicted_residual)
        rows.append(row)
    if not rows:
        raise DataError("no groups to tabulate")
    return pd.DataFrame(rows)
