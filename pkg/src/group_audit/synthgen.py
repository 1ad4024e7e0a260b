"""Synthetic person-year panels with planted, non-linear ground truth.

Components are drawn independently at calibrated prevalences; spend is a
linear function of the indicators and the market, plus any planted
interaction effects (which a main-effects formula cannot absorb), plus
zero-mean noise.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .domain import (CONDITIONS, MARKETPLACES, MEDICARE, ConfigError, EmptyPanel,
                     FormulaProfile, GroupSignature, Panel)
from .rng import synth_stream

BLOCK_SIZE = 1 << 16
LOGNORMAL_SIGMA = 1.0


class InvalidSpec(ConfigError):
    pass


def _pct_table(rows: Mapping[str, Sequence[float]], years=(2016, 2017, 2018)):
    return {y: {k: v[j] / 100.0 for k, v in rows.items()} for j, y in enumerate(years)}


# Marketplaces sample characteristics, percent by sample year.
MARKETPLACES_PREVALENCE = _pct_table({
    "female": (52.3, 52.2, 51.6),
    "age_21_29": (17.9, 17.9, 18.0),
    "age_30_39": (20.4, 20.6, 21.0),
    "age_40_49": (23.7, 23.7, 23.7),
    "age_50_59": (27.2, 26.9, 26.6),
    "age_60_65": (10.8, 10.8, 10.7),
    "arthritis": (4.5, 4.5, 4.5),
    "asthma": (10.6, 10.7, 10.8),
    "cancer": (7.1, 7.0, 6.8),
    "diabetes": (8.9, 9.0, 8.9),
    "heart": (9.1, 9.1, 9.3),
    "hypertension": (14.1, 13.9, 13.7),
    "kidney": (0.6, 0.6, 0.6),
    "lipid": (10.2, 9.7, 9.5),
    "mental": (11.1, 11.7, 12.6),
    "nervous": (0.7, 0.7, 0.7),
    "osteoporosis": (0.6, 0.6, 0.6),
    "viral": (0.4, 0.4, 0.4),
})

# Medicare sample characteristics; conditions measured in the prior year.
MEDICARE_PREVALENCE = _pct_table({
    "female": (55.2, 55.1, 55.0),
    "age_65_69": (27.9, 27.6, 26.6),
    "age_70_79": (45.1, 46.2, 47.6),
    "age_80_89": (22.1, 21.3, 21.0),
    "age_90plus": (4.9, 4.8, 4.7),
    "arthritis": (28.9, 30.1, 30.7),
    "asthma": (37.4, 37.4, 38.8),
    "cancer": (33.0, 33.3, 33.9),
    "diabetes": (35.7, 37.2, 38.3),
    "heart": (45.6, 45.3, 45.8),
    "hypertension": (68.6, 68.5, 68.3),
    "kidney": (11.6, 12.2, 12.8),
    "lipid": (65.7, 65.4, 66.0),
    "mental": (34.2, 35.6, 37.7),
    "nervous": (6.8, 7.3, 7.5),
    "osteoporosis": (11.1, 10.8, 11.0),
    "viral": (0.4, 0.4, 0.4),
})

# Illustrative main effects in dollars; they only need to be plausible,
# since the fitted formula absorbs them exactly.
DEFAULT_EFFECTS = {
    "female": 600.0,
    "arthritis": 5500.0, "asthma": 2500.0, "cancer": 9000.0, "diabetes": 4000.0,
    "heart": 6000.0, "hypertension": 2000.0, "kidney": 12000.0, "lipid": 1500.0,
    "mental": 3500.0, "nervous": 7000.0, "osteoporosis": 2500.0, "viral": 8000.0,
}
MARKETPLACES_AGE_EFFECTS = {"age_21_29": 0.0, "age_30_39": 400.0, "age_40_49": 900.0,
                            "age_50_59": 1800.0, "age_60_65": 2800.0}
MEDICARE_AGE_EFFECTS = {"age_65_69": 0.0, "age_70_79": 1200.0, "age_80_89": 2600.0,
                        "age_90plus": 3800.0}


@dataclass(frozen=True)
class PlantedInteraction:
    signature: GroupSignature
    extra_spend: float


@dataclass(frozen=True)
class GeneratorSpec:
    """Configuration of the synthetic panel generator.

    ``prevalence_by_year`` overrides ``prevalence`` for the listed years.
    Age-band prevalences are normalized to a categorical distribution; every
    other component is an independent Bernoulli draw. ``hcc_map[j]`` names
    the component whose indicator becomes HCC ``j``.
    """

    profile: FormulaProfile = MARKETPLACES
    n_persons: int = 100_000
    years: tuple[int, ...] = (2016, 2017, 2018)
    prevalence: Mapping[str, float] = field(default_factory=lambda: dict(MARKETPLACES_PREVALENCE[2016]))
    prevalence_by_year: Mapping[int, Mapping[str, float]] | None = None
    market_count: int = 50
    market_effects: tuple[float, ...] | None = None
    base_spend: float = 3500.0
    condition_effects: Mapping[str, float] = field(default_factory=dict)
    planted_interactions: tuple[PlantedInteraction, ...] = ()
    noise_scale: float = 0.0
    noise: str = "lognormal"
    hcc_map: tuple[int, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        p = self.profile
        if self.n_persons < 1:
            raise InvalidSpec("n_persons: must be >= 1")
        if not self.years:
            raise InvalidSpec("years: at least one year required")
        if self.market_count < 1:
            raise InvalidSpec("market_count: must be >= 1")
        if self.market_effects is not None and len(self.market_effects) != self.market_count:
            raise InvalidSpec("market_effects: need one effect per market")
        if not self.noise_scale >= 0:
            raise InvalidSpec("noise_scale: must be >= 0")
        if self.noise not in ("gaussian", "lognormal"):
            raise InvalidSpec(f"noise: unknown family {self.noise!r}")
        if not 0 <= self.seed < 2**64:
            raise InvalidSpec("seed: must be a 64-bit unsigned integer")
        tables = [self.prevalence, *(self.prevalence_by_year or {}).values()]
        for table in tables:
            for label, v in table.items():
                if label not in p.component_labels:
                    _unknown(label)
                if not 0 <= v <= 1:
                    raise InvalidSpec(f"prevalence.{label}: {v} outside [0, 1]")
        for label in self.condition_effects:
            if label not in p.component_labels:
                _unknown(label)
        for planted in self.planted_interactions:
            if max(planted.signature.indices) >= p.n_components:
                raise InvalidSpec("planted_interactions: component index out of range")
        if len(self.resolved_hcc_map()) != p.hcc_count:
            raise InvalidSpec(f"hcc_map: need {p.hcc_count} entries")
        if any(not 0 <= j < p.n_components for j in self.resolved_hcc_map()):
            raise InvalidSpec("hcc_map: component index out of range")

    def prevalence_for(self, year: int) -> dict[str, float]:
        table = dict(self.prevalence)
        if self.prevalence_by_year and year in self.prevalence_by_year:
            table.update(self.prevalence_by_year[year])
        return table

    def resolved_market_effects(self) -> np.ndarray:
        if self.market_effects is not None:
            return np.asarray(self.market_effects, dtype=np.float64)
        if self.market_count == 1:
            return np.zeros(1)
        return np.round(np.linspace(-1000.0, 1000.0, self.market_count), 2)

    def resolved_hcc_map(self) -> tuple[int, ...]:
        if self.hcc_map is not None:
            return tuple(self.hcc_map)
        labels = self.profile.component_labels
        conds = [labels.index(c) for c in CONDITIONS if c in labels]
        return tuple(conds[: self.profile.hcc_count])


def _unknown(label):
    raise InvalidSpec(f"unknown component label {label!r}")


def default_spec(profile: FormulaProfile | str = "marketplaces", **overrides) -> GeneratorSpec:
    """Generator calibrated to the published sample characteristics of ``profile``."""
    if isinstance(profile, str):
        profile = {"marketplaces": MARKETPLACES, "medicare": MEDICARE}.get(profile)
        if profile is None:
            raise InvalidSpec("profile: no calibrated defaults for this profile")
    if profile.name == "medicare":
        table, ages, base = MEDICARE_PREVALENCE, MEDICARE_AGE_EFFECTS, 5000.0
    else:
        table, ages, base = MARKETPLACES_PREVALENCE, MARKETPLACES_AGE_EFFECTS, 3500.0
    kwargs = dict(
        profile=profile,
        prevalence=dict(table[2016]),
        prevalence_by_year={y: dict(t) for y, t in table.items()},
        base_spend=base,
        condition_effects={**ages, **DEFAULT_EFFECTS},
    )
    kwargs.update(overrides)
    return GeneratorSpec(**kwargs)


def _noise(rng, m, spec: GeneratorSpec) -> np.ndarray:
    if spec.noise_scale == 0:
        return np.zeros(m)
    if spec.noise == "gaussian":
        return spec.noise_scale * rng.standard_normal(m)
    s2 = LOGNORMAL_SIGMA ** 2
    mean = math.exp(s2 / 2)
    sd = math.sqrt((math.exp(s2) - 1) * math.exp(s2))
    return spec.noise_scale * (rng.lognormal(0.0, LOGNORMAL_SIGMA, m) - mean) / sd


def _block(spec: GeneratorSpec, year: int, block: int, start: int, stop: int) -> dict:
    p = spec.profile
    rng = synth_stream(spec.seed, year, block)
    m = stop - start
    prev = spec.prevalence_for(year)
    labels = p.component_labels
    n_bands = len(p.age_bands)

    band_p = np.array([prev.get(labels[b], np.nan) for b in range(n_bands)])
    if np.isnan(band_p).any() or band_p.sum() <= 0:
        band_p = np.full(n_bands, 1.0 / n_bands)
    band_p = band_p / band_p.sum()
    age_band = rng.choice(n_bands, size=m, p=band_p)
    sex = (rng.random(m) < prev.get("female", 0.5)).astype(np.int64)

    comps = np.zeros((m, p.n_components), dtype=np.uint8)
    comps[np.arange(m), age_band] = 1
    other = [j for j in range(n_bands, p.n_components)]
    female_col = labels.index("female") if "female" in labels else None
    draws = rng.random((m, len(other)))
    for k, j in enumerate(other):
        if j == female_col:
            comps[:, j] = sex
        else:
            comps[:, j] = draws[:, k] < prev.get(labels[j], 0.0)

    market = rng.integers(0, spec.market_count, size=m)
    noise = _noise(rng, m, spec)

    effects = np.array([spec.condition_effects.get(lab, 0.0) for lab in labels])
    spend = spec.base_spend + comps @ effects + spec.resolved_market_effects()[market]
    for planted in spec.planted_interactions:
        spend = spend + planted.extra_spend * planted.signature.mask(comps)
    spend = np.round(np.maximum(0.0, spend + noise), 2)
    spend[spend == 0] = 0.0  # drop negative zero

    return dict(
        person_id=np.array([f"{year}-{i:07d}" for i in range(start, stop)], dtype=object),
        age_band=age_band.astype(np.int64),
        sex=sex,
        market=market.astype(np.int64),
        components=comps,
        spend=spend,
    )


def generate(spec: GeneratorSpec, threads: int = 1) -> dict[int, Panel]:
    """Draw one panel per sample year, keyed by spend year.

    Persons are generated in fixed blocks of ``BLOCK_SIZE``, each from its
    own substream, so the output does not depend on ``threads``.
    """
    p = spec.profile
    hcc_map = list(spec.resolved_hcc_map())
    out = {}
    for year in spec.years:
        bounds = [(b, s, min(s + BLOCK_SIZE, spec.n_persons))
                  for b, s in enumerate(range(0, spec.n_persons, BLOCK_SIZE))]
        if threads > 1 and len(bounds) > 1:
            with ThreadPoolExecutor(threads) as pool:
                parts = list(pool.map(lambda a: _block(spec, year, *a), bounds))
        else:
            parts = [_block(spec, year, *a) for a in bounds]
        cols = {k: np.concatenate([part[k] for part in parts]) for k in parts[0]}
        n = spec.n_persons
        comps = cols["components"]
        out[year] = Panel(
            profile=p,
            person_id=cols["person_id"],
            feature_year=np.full(n, year - p.lag, dtype=np.int64),
            spend_year=np.full(n, year, dtype=np.int64),
            age_band=cols["age_band"],
            sex=cols["sex"],
            market=cols["market"],
            hcc=np.ascontiguousarray(comps[:, hcc_map]).reshape(n, len(hcc_map)),
            components=comps,
            spend=cols["spend"],
        )
    return out


def prevalence_report(panels: Panel | Mapping[int, Panel]) -> pd.DataFrame:
    """Empirical component prevalence, one row per (year, component)."""
    if isinstance(panels, Panel):
        panels = {int(panels.spend_year[0]) if len(panels) else 0: panels}
    if not panels or any(len(p) == 0 for p in panels.values()):
        raise EmptyPanel("prevalence_report needs a non-empty panel")
    rows = []
    for year in sorted(panels):
        panel = panels[year]
        means = panel.components.mean(axis=0, dtype=np.float64)
        for label, v in zip(panel.profile.component_labels, means):
            rows.append({"year": year, "component": label, "prevalence": float(v), "n": len(panel)})
    return pd.DataFrame(rows, columns=["year", "component", "prevalence", "n"])
