"""Group importance: fold forests into per-signature statistics.

A signature's importance in a year is the fraction of trees that grew a
leaf with exactly that signature, together with the mean of those leaves'
residuals (one vote per tree). Persistent groups are those reaching the
tree-fraction threshold in every sample year.
"""

from __future__ import annotations

import math
from dataclasses import replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .domain import DataError, GroupSignature, GroupStats, Panel, YearStats
from .gforest import TreeRecord

FRACTION_ATOL = 1e-12


class YearMismatch(DataError):
    pass


def collect(forests: Mapping[int, Sequence[TreeRecord]], n_trees: int,
            years: Iterable[int] | None = None) -> dict[GroupSignature, GroupStats]:
    """Tree counts and mean predicted residual per signature and year."""
    if years is not None and sorted(years) != sorted(forests):
        raise YearMismatch(f"forests cover {sorted(forests)}, expected {sorted(years)}")
    sums: dict[GroupSignature, dict[int, list]] = {}
    for year in sorted(forests):
        for tree in forests[year]:
            seen = set()
            for leaf in tree.leaves:
                sig = leaf.signature
                if sig is None:
                    continue
                if sig in seen:
                    raise AssertionError(f"tree {tree.tree_index} holds signature {sig} twice")
                seen.add(sig)
                acc = sums.setdefault(sig, {}).setdefault(year, [0, 0.0])
                acc[0] += 1
                acc[1] += leaf.mean_residual
    out = {}
    for sig in sorted(sums):
        per_year = {y: YearStats(c, c / n_trees, total / c) for y, (c, total) in sorted(sums[sig].items())}
        overall = sum(ys.mean_predicted_residual for ys in per_year.values()) / len(per_year)
        out[sig] = GroupStats(sig, per_year, overall)
    return out


def _fraction_ok(stats: GroupStats, year: int, threshold: float) -> bool:
    ys = stats.per_year.get(year)
    return ys is not None and ys.tree_fraction >= threshold - FRACTION_ATOL


def persistence_filter(stats: Mapping[GroupSignature, GroupStats] | Iterable[GroupStats],
                       threshold: float, years: Iterable[int]) -> dict[GroupSignature, GroupStats]:
    """Keep signatures found in at least ``threshold`` of the trees in every year."""
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    years = list(years)
    items = stats.values() if isinstance(stats, Mapping) else stats
    return {g.signature: g for g in items if all(_fraction_ok(g, y, threshold) for y in years)}


def year_filter(stats, threshold: float, year: int) -> dict[GroupSignature, GroupStats]:
    """Single-year variant: the group only has to reach ``threshold`` in ``year``."""
    return persistence_filter(stats, threshold, [year])


def observed_residuals(stats: Mapping[GroupSignature, GroupStats], panels: Mapping[int, Panel],
                       fits) -> dict[GroupSignature, GroupStats]:
    """Fill observed mean residual and member count from the full samples.

    ``fits`` maps year to a FitResult or a residual array aligned with the
    panel. Groups matching no row keep a NaN mean and a zero count.
    """
    residuals = {y: np.asarray(getattr(f, "residuals", f), dtype=np.float64) for y, f in fits.items()}
    out = {}
    for sig, g in stats.items():
        per_year = dict(g.per_year)
        for year, panel in panels.items():
            r = residuals[year]
            if len(r) != len(panel):
                raise DataError(f"{year}: residuals and panel are not row-aligned")
            mask = sig.mask(panel.components)
            n = int(mask.sum())
            obs = float(r[mask].mean()) if n else math.nan
            ys = per_year.get(year, YearStats(0, 0.0, math.nan))
            per_year[year] = replace(ys, observed_mean_residual=obs, member_count=n)
        out[sig] = replace(g, per_year=dict(sorted(per_year.items())))
    return out


def rank(stats, top_k: int, year: int | None = None) -> tuple[list[GroupStats], list[GroupStats]]:
    """Top undercompensated (most negative first) and overcompensated groups.

    Ranks on the cross-year mean, or on one year's mean when ``year`` is
    given. Zero means belong to neither list; ties fall back to signature
    order.
    """
    items = list(stats.values() if isinstance(stats, Mapping) else stats)

    def value(g: GroupStats) -> float:
        if year is None:
            return g.overall_mean_predicted_residual
        ys = g.per_year.get(year)
        return ys.mean_predicted_residual if ys else math.nan

    under = sorted((g for g in items if value(g) < 0), key=lambda g: (value(g), g.signature))
    over = sorted((g for g in items if value(g) > 0), key=lambda g: (-value(g), g.signature))
    return under[:top_k], over[:top_k]
