"""CSV persistence for panels and audit outputs.

Panel files carry one row per person-year::

    person_id,feature_year,spend_year,age_band,sex,market,hcc_0..,comp_0..,spend

Spend is written in cents (two decimals). Every other float is written in
its shortest round-trip form, so reading back yields the identical value.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .domain import DataError, FormulaProfile, GroupSignature, GroupStats, Panel, YearStats


class SchemaMismatch(DataError):
    pass


class RowError(DataError):
    def __init__(self, path, line: int, field: str, message: str):
        super().__init__(f"{path}: line {line}, field {field}: {message}")
        self.line = line
        self.field = field


class IoError(DataError):
    pass


def panel_header(profile: FormulaProfile) -> list[str]:
    return (["person_id", "feature_year", "spend_year", "age_band", "sex", "market"]
            + [f"hcc_{j}" for j in range(profile.hcc_count)]
            + [f"comp_{j}" for j in range(profile.n_components)]
            + ["spend"])


def _fmt(x: float) -> str:
    return repr(float(x))


def _floats(values) -> np.ndarray:
    """Correctly rounded parse (``pd.to_numeric`` is not round-trip exact); NaN where unparseable."""
    out = np.empty(len(values), dtype=np.float64)
    for i, v in enumerate(values):
        try:
            out[i] = float(v)
        except ValueError:
            out[i] = math.nan
    return out


def _read_text_table(path) -> pd.DataFrame:
    try:
        return pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False)
    except FileNotFoundError:
        raise IoError(f"{path}: no such file") from None
    except pd.errors.EmptyDataError:
        raise SchemaMismatch(f"{path}: file is empty, expected a header row") from None
    except (OSError, pd.errors.ParserError) as exc:
        raise IoError(f"{path}: {exc}") from None


def read_panel(path, profile: FormulaProfile) -> Panel:
    """Load and validate a panel file; rows keep their file order.

    Raises
    ------
    SchemaMismatch
        The header does not match ``profile``.
    RowError
        A field breaks a record invariant; carries the 1-based file line.
    IoError
        The file cannot be read.
    """
    df = _read_text_table(path)
    expected = panel_header(profile)
    if list(df.columns) != expected:
        raise SchemaMismatch(f"{path}: header {list(df.columns)[:8]}... does not match the "
                             f"{profile.name} profile ({len(expected)} columns expected)")
    n = len(df)
    errors: list[tuple[int, int, str, str]] = []  # (row, column position, field, message)

    def report(mask: np.ndarray, col: str, msg: str):
        rows = np.flatnonzero(mask)
        if len(rows):
            errors.append((int(rows[0]), expected.index(col), col, msg))

    def ints(col: str, pattern=r"-?\d+", msg="expected an integer"):
        s = df[col]
        ok = s.str.fullmatch(pattern).to_numpy(dtype=bool) if n else np.ones(0, bool)
        report(~ok, col, msg)
        return np.where(ok, s, "0").astype(np.int64) if n else np.zeros(0, np.int64)

    feature_year = ints("feature_year")
    spend_year = ints("spend_year")
    age_band = ints("age_band")
    sex = ints("sex", r"[01]", "expected 0 or 1")
    market = ints("market")
    hcc = np.zeros((n, profile.hcc_count), dtype=np.uint8)
    for j in range(profile.hcc_count):
        hcc[:, j] = ints(f"hcc_{j}", r"[01]", "indicator must be 0 or 1")
    comps = np.zeros((n, profile.n_components), dtype=np.uint8)
    for j in range(profile.n_components):
        comps[:, j] = ints(f"comp_{j}", r"[01]", "indicator must be 0 or 1")

    spend = _floats(df["spend"])
    decimal = df["spend"].str.fullmatch(r"\d+(\.\d*)?|\.\d+").to_numpy(dtype=bool) if n else np.ones(0, bool)
    report(~decimal | ~np.isfinite(spend), "spend", "expected a non-negative decimal amount")

    report(age_band < 0, "age_band", "must be >= 0")
    report(age_band >= len(profile.age_bands), "age_band",
           f"must be < {len(profile.age_bands)} for the {profile.name} profile")
    report(spend_year != feature_year + profile.lag, "spend_year",
           f"must equal feature_year + {profile.lag} for the {profile.name} profile")
    ids = df["person_id"].to_numpy(dtype=object)
    report(ids == "", "person_id", "must not be empty")

    if errors:
        row, _, field, msg = min(errors)
        raise RowError(path, row + 2, field, msg)

    return Panel(profile, ids, feature_year, spend_year, age_band, sex, market, hcc, comps, spend)


def write_panel(panel: Panel, path) -> None:
    """Write ``panel`` with the canonical header; spend rounded to cents."""
    header = panel_header(panel.profile)
    cols = {
        "person_id": panel.person_id,
        "feature_year": panel.feature_year,
        "spend_year": panel.spend_year,
        "age_band": panel.age_band,
        "sex": panel.sex,
        "market": panel.market,
    }
    for j in range(panel.profile.hcc_count):
        cols[f"hcc_{j}"] = panel.hcc[:, j]
    for j in range(panel.profile.n_components):
        cols[f"comp_{j}"] = panel.components[:, j]
    cols["spend"] = [f"{v:.2f}" for v in panel.spend]
    _write_frame(pd.DataFrame(cols, columns=header), path)


def _write_frame(df: pd.DataFrame, path) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(path, index=False, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
    except OSError as exc:
        raise IoError(f"{path}: {exc}") from None


def write_residuals(path, person_id: Sequence, predictions: np.ndarray, residuals: np.ndarray) -> None:
    _write_frame(pd.DataFrame({
        "person_id": person_id,
        "prediction": [_fmt(v) for v in predictions],
        "residual": [_fmt(v) for v in residuals],
    }), path)


def read_residuals(path) -> pd.DataFrame:
    df = _read_text_table(path)
    if list(df.columns) != ["person_id", "prediction", "residual"]:
        raise SchemaMismatch(f"{path}: expected header person_id,prediction,residual")
    out = pd.DataFrame({"person_id": df["person_id"].to_numpy(dtype=object)})
    for col in ("prediction", "residual"):
        vals = _floats(df[col])
        bad = np.flatnonzero(np.isnan(vals))
        if len(bad):
            raise RowError(path, int(bad[0]) + 2, col, "expected a number")
        out[col] = vals
    return out


def write_coefficients(path, columns: Sequence[str], beta: np.ndarray, dropped: Sequence[str]) -> None:
    names = list(columns) + list(dropped)
    values = [_fmt(b) for b in beta] + ["dropped"] * len(dropped)
    _write_frame(pd.DataFrame({"column": names, "beta": values}), path)


def write_forest(path, trees, labels: Sequence[str]) -> None:
    """Dump every signature-bearing leaf of ``trees`` (see gforest.TreeRecord)."""
    rows = []
    for tree in trees:
        for leaf_id, leaf in enumerate(tree.leaves):
            if leaf.signature is None:
                continue
            rows.append((tree.tree_index, leaf_id, leaf.signature.encode(labels),
                         leaf.member_count, _fmt(leaf.mean_residual)))
    _write_frame(pd.DataFrame(rows, columns=["tree_index", "leaf_id", "signature",
                                             "member_count", "mean_residual"]), path)


def read_forest(path, labels: Sequence[str]) -> pd.DataFrame:
    df = _read_text_table(path)
    if list(df.columns) != ["tree_index", "leaf_id", "signature", "member_count", "mean_residual"]:
        raise SchemaMismatch(f"{path}: unexpected forest header")
    df["tree_index"] = df["tree_index"].astype(np.int64)
    df["leaf_id"] = df["leaf_id"].astype(np.int64)
    df["member_count"] = df["member_count"].astype(np.int64)
    df["mean_residual"] = _floats(df["mean_residual"])
    df["signature"] = [GroupSignature.decode(s, labels) for s in df["signature"]]
    return df


def group_columns(years: Iterable[int]) -> list[str]:
    cols = ["signature", "n_constraints"]
    for y in years:
        cols += [f"tree_count_{y}", f"tree_fraction_{y}", f"predicted_{y}",
                 f"observed_{y}", f"member_count_{y}"]
    return cols + ["overall_predicted", "overall_observed"]


def _opt(x: float) -> str:
    return "" if math.isnan(x) else _fmt(x)


def write_groups(path, stats: Iterable[GroupStats], years: Sequence[int], labels: Sequence[str]) -> None:
    """Write group statistics, one row per signature, in the given order."""
    rows = []
    for g in stats:
        row = [g.signature.encode(labels), len(g.signature)]
        observed = []
        for y in years:
            ys = g.per_year.get(y)
            if ys is None:
                row += [0, _fmt(0.0), "", "", 0]
                continue
            row += [ys.tree_count, _fmt(ys.tree_fraction), _opt(ys.mean_predicted_residual),
                    _opt(ys.observed_mean_residual), ys.member_count]
            if not math.isnan(ys.observed_mean_residual):
                observed.append(ys.observed_mean_residual)
        row += [_opt(g.overall_mean_predicted_residual),
                _fmt(sum(observed) / len(observed)) if observed else ""]
        rows.append(row)
    _write_frame(pd.DataFrame(rows, columns=group_columns(years)), path)


def read_groups(path, labels: Sequence[str]) -> tuple[list[int], list[GroupStats]]:
    """Inverse of :func:`write_groups`; returns ``(years, stats)``."""
    df = _read_text_table(path)
    years = [int(c.split("_")[-1]) for c in df.columns if c.startswith("tree_count_")]
    if list(df.columns) != group_columns(years):
        raise SchemaMismatch(f"{path}: unexpected group table header")

    def num(v: str) -> float:
        return float(v) if v != "" else math.nan

    out = []
    for rec in df.to_dict("records"):
        per_year = {}
        for y in years:
            count = int(rec[f"tree_count_{y}"])
            if count == 0 and rec[f"predicted_{y}"] == "":
                continue
            per_year[y] = YearStats(count, float(rec[f"tree_fraction_{y}"]), num(rec[f"predicted_{y}"]),
                                    num(rec[f"observed_{y}"]), int(rec[f"member_count_{y}"]))
        out.append(GroupStats(GroupSignature.decode(rec["signature"], labels), per_year,
                              num(rec["overall_predicted"])))
    return years, out


def write_table(path, df: pd.DataFrame) -> None:
    _write_frame(df, path)


def load_panels(directory, profile: FormulaProfile, years: Iterable[int]) -> Mapping[int, Panel]:
    return {y: read_panel(Path(directory) / f"panel_{y}.csv", profile) for y in years}
