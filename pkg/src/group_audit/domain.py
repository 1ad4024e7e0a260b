"""Shared vocabulary types: profiles, person-year panels, group signatures."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np


class AuditError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(AuditError):
    pass


class DataError(AuditError):
    pass


class ConflictingConstraint(AuditError, ValueError):
    pass


class EmptyPanel(DataError):
    pass


CONDITIONS = (
    "arthritis",
    "asthma",
    "cancer",
    "diabetes",
    "heart",
    "hypertension",
    "kidney",
    "lipid",
    "mental",
    "nervous",
    "osteoporosis",
    "viral",
)

# Preset (min_node_size, max_leaf_nodes) grid.
PRESET_SETTINGS = ((100, 8), (100, 64), (10000, 8), (10000, 64))


def _band_label(band: str) -> str:
    return "age_" + band.replace("-", "_").replace("+", "plus")


@dataclass(frozen=True)
class FormulaProfile:
    """Which payment formula is audited and how its groups are built.

    The component vector is laid out as one indicator per age band, then
    ``female``, then the chronic conditions.
    """

    name: str
    age_bands: tuple[str, ...]
    hcc_count: int
    component_labels: tuple[str, ...]
    prospective: bool = False
    market_role: str = "MSA"

    def __post_init__(self):
        if self.name not in ("marketplaces", "medicare", "custom"):
            raise ConfigError(f"profile.name: unknown profile {self.name!r}")
        if not self.age_bands:
            raise ConfigError("profile.age_bands: at least one band required")
        if self.hcc_count < 0:
            raise ConfigError("profile.hcc_count: must be >= 0")
        if len(set(self.component_labels)) != len(self.component_labels):
            raise ConfigError("profile.component_labels: labels must be unique")
        if not self.component_labels:
            raise ConfigError("profile.component_labels: at least one component required")

    @property
    def n_components(self) -> int:
        return len(self.component_labels)

    @property
    def n_cells(self) -> int:
        return 2 * len(self.age_bands)

    @property
    def lag(self) -> int:
        return 1 if self.prospective else 0

    def component_index(self, label: str) -> int:
        try:
            return self.component_labels.index(label)
        except ValueError:
            raise ConfigError(f"unknown component {label!r}") from None

    @classmethod
    def build(cls, name, age_bands, conditions=CONDITIONS, hcc_count=None,
              prospective=False, market_role="MSA") -> "FormulaProfile":
        """Lay out components as age-band indicators, ``female``, conditions."""
        age_bands = tuple(age_bands)
        labels = tuple(_band_label(b) for b in age_bands) + ("female",) + tuple(conditions)
        if hcc_count is None:
            hcc_count = len(conditions)
        return cls(name, age_bands, hcc_count, labels, prospective, market_role)


MARKETPLACES = FormulaProfile.build(
    "marketplaces", ("21-29", "30-39", "40-49", "50-59", "60-65"), market_role="MSA"
)
MEDICARE = FormulaProfile.build(
    "medicare", ("65-69", "70-79", "80-89", "90+"), prospective=True, market_role="county"
)
PROFILES = {"marketplaces": MARKETPLACES, "medicare": MEDICARE}


def get_profile(name: str) -> FormulaProfile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ConfigError(f"profile: unknown profile {name!r} "
                          f"(choose from {', '.join(PROFILES)})") from None


@dataclass(frozen=True, order=True)
class GroupSignature:
    """A group: sorted ``(component_index, present)`` constraints.

    Build through :func:`canonicalize`; two signatures are equal exactly
    when their canonical constraint tuples are.
    """

    constraints: tuple[tuple[int, bool], ...]

    def __post_init__(self):
        c = self.constraints
        if not c:
            raise ValueError("a group signature needs at least one constraint")
        idx = [i for i, _ in c]
        if any(a >= b for a, b in zip(idx, idx[1:])):
            raise ValueError(f"constraints not canonical: {c!r}")

    def __len__(self):
        return len(self.constraints)

    def __iter__(self):
        return iter(self.constraints)

    @property
    def indices(self) -> tuple[int, ...]:
        return tuple(i for i, _ in self.constraints)

    def mask(self, components: np.ndarray) -> np.ndarray:
        """Boolean mask of the rows of ``components`` satisfying every constraint."""
        out = np.ones(components.shape[0], dtype=bool)
        for i, present in self.constraints:
            out &= components[:, i] == (1 if present else 0)
        return out

    def to_bytes(self) -> bytes:
        return b"".join(i.to_bytes(4, "big") + (b"+" if p else b"-")
                        for i, p in self.constraints)

    def encode(self, labels: Sequence[str] | None = None) -> str:
        """Render as ``label:+&label:-``; indices stand in when no labels are given."""
        def name(i):
            return labels[i] if labels is not None else str(i)
        return "&".join(f"{name(i)}:{'+' if p else '-'}" for i, p in self.constraints)

    @classmethod
    def decode(cls, text: str, labels: Sequence[str] | None = None) -> "GroupSignature":
        raw = []
        for token in text.split("&"):
            name, _, sign = token.rpartition(":")
            if sign not in "+-" or not name or len(sign) != 1:
                raise ValueError(f"bad signature token {token!r}")
            idx = labels.index(name) if labels is not None else int(name)
            raw.append((idx, sign == "+"))
        return canonicalize(raw)


def canonicalize(raw_constraints: Iterable[tuple[int, bool]]) -> GroupSignature:
    """Deduplicate and sort path constraints into a :class:`GroupSignature`.

    Raises
    ------
    ConflictingConstraint
        If one component is required both present and absent.
    """
    seen: dict[int, bool] = {}
    for idx, present in raw_constraints:
        idx, present = int(idx), bool(present)
        if idx < 0:
            raise ValueError(f"negative component index {idx}")
        if seen.setdefault(idx, present) != present:
            raise ConflictingConstraint(f"component {idx} required both present and absent")
    if not seen:
        raise ValueError("cannot canonicalize an empty constraint list")
    return GroupSignature(tuple(sorted(seen.items())))


@dataclass(frozen=True)
class YearStats:
    tree_count: int
    tree_fraction: float
    mean_predicted_residual: float
    observed_mean_residual: float = math.nan
    member_count: int = 0


@dataclass(frozen=True)
class GroupStats:
    signature: GroupSignature
    per_year: Mapping[int, YearStats]
    overall_mean_predicted_residual: float

    def fractions(self, years: Iterable[int]) -> list[float]:
        return [self.per_year[y].tree_fraction if y in self.per_year else 0.0 for y in years]


@dataclass(frozen=True)
class AuditConfig:
    """Everything an audit run needs besides the data."""

    profile: FormulaProfile = MARKETPLACES
    n_trees: int = 1000
    mtry: int = 10
    min_node_size: int = 100
    max_leaf_nodes: int = 8
    tree_fraction_threshold: float = 0.01
    years: tuple[int, ...] = (2016, 2017, 2018)
    sample_size: int = 1_000_000
    master_seed: int = 20210601
    top_k: int = 10
    settings: tuple[tuple[int, int], ...] = PRESET_SETTINGS

    def __post_init__(self):
        s = self.profile.n_components
        if not 1 <= self.mtry <= s:
            raise ConfigError(f"mtry: must lie in [1, {s}], got {self.mtry}")
        if self.min_node_size < 1:
            raise ConfigError("min_node_size: must be >= 1")
        if self.max_leaf_nodes < 2:
            raise ConfigError("max_leaf_nodes: must be >= 2")
        if not 0 < self.tree_fraction_threshold <= 1:
            raise ConfigError("tree_fraction_threshold: must lie in (0, 1]")
        if self.n_trees < 1:
            raise ConfigError("n_trees: must be >= 1")
        if self.sample_size < 1:
            raise ConfigError("sample_size: must be >= 1")
        if not self.years:
            raise ConfigError("years: at least one year required")
        if not 0 <= self.master_seed < 2**64:
            raise ConfigError("master_seed: must be a 64-bit unsigned integer")
        if self.top_k < 1:
            raise ConfigError("top_k: must be >= 1")
        for m, l in self.settings:
            if m < 1 or l < 2:
                raise ConfigError(f"settings: invalid pair ({m}, {l})")


@dataclass(frozen=True)
class PersonYear:
    person_id: str
    feature_year: int
    spend_year: int
    age_band: int
    sex: int
    market: int
    hcc: tuple[int, ...]
    components: tuple[int, ...]
    spend: float

    def validate(self, profile: FormulaProfile) -> None:
        problems = _record_problems(self, profile)
        if problems:
            raise DataError(f"person {self.person_id}: {problems[0]}")


def _record_problems(r: PersonYear, profile: FormulaProfile) -> list[str]:
    out = []
    if not (r.spend >= 0) or math.isinf(r.spend):
        out.append("spend must be a finite non-negative amount")
    if r.spend_year != r.feature_year + profile.lag:
        out.append("spend_year inconsistent with feature_year for this profile")
    if not 0 <= r.age_band < len(profile.age_bands):
        out.append("age_band out of range")
    if r.sex not in (0, 1):
        out.append("sex must be 0 or 1")
    if len(r.components) != profile.n_components:
        out.append("component vector has wrong length")
    if len(r.hcc) != profile.hcc_count:
        out.append("hcc vector has wrong length")
    return out


@dataclass(frozen=True, eq=False)
class Panel:
    """Columnar person-year panel for one sample year (or any row set).

    ``sex`` is coded 1 for female. Arrays are owned by the panel and must
    not be mutated.
    """

    profile: FormulaProfile
    person_id: np.ndarray
    feature_year: np.ndarray
    spend_year: np.ndarray
    age_band: np.ndarray
    sex: np.ndarray
    market: np.ndarray
    hcc: np.ndarray
    components: np.ndarray
    spend: np.ndarray = field(repr=False)

    def __post_init__(self):
        n = len(self.person_id)
        for name in ("feature_year", "spend_year", "age_band", "sex", "market", "spend"):
            if len(getattr(self, name)) != n:
                raise DataError(f"column {name} has {len(getattr(self, name))} rows, expected {n}")
        if self.hcc.shape != (n, self.profile.hcc_count):
            raise DataError(f"hcc block has shape {self.hcc.shape}, expected ({n}, {self.profile.hcc_count})")
        if self.components.shape != (n, self.profile.n_components):
            raise DataError(f"component block has shape {self.components.shape}, "
                            f"expected ({n}, {self.profile.n_components})")
        for arr in (self.person_id, self.feature_year, self.spend_year, self.age_band, self.sex,
                    self.market, self.hcc, self.components, self.spend):
            arr.flags.writeable = False

    def __len__(self):
        return len(self.person_id)

    def __eq__(self, other):
        if not isinstance(other, Panel):
            return NotImplemented
        return self.profile == other.profile and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("person_id", "feature_year", "spend_year", "age_band", "sex",
                      "market", "hcc", "components", "spend"))

    __hash__ = None

    @property
    def cells(self) -> np.ndarray:
        """Age x Sex cell index, ``2 * age_band + sex``."""
        return 2 * self.age_band.astype(np.int64) + self.sex

    def invalid_rows(self) -> dict[int, str]:
        """Row index -> first problem, for rows breaking a record invariant."""
        p = self.profile
        bad: dict[int, str] = {}

        def flag(mask, msg):
            for i in np.flatnonzero(mask):
                bad.setdefault(int(i), msg)

        flag(~(self.spend >= 0) | np.isinf(self.spend), "spend: must be a finite non-negative amount")
        flag(self.spend_year != self.feature_year + p.lag, "spend_year: inconsistent with feature_year")
        flag((self.age_band < 0) | (self.age_band >= len(p.age_bands)), "age_band: out of range")
        flag((self.sex != 0) & (self.sex != 1), "sex: must be 0 or 1")
        if self.hcc.size:
            flag(((self.hcc != 0) & (self.hcc != 1)).any(axis=1), "hcc: indicators must be 0 or 1")
        flag(((self.components != 0) & (self.components != 1)).any(axis=1),
             "components: indicators must be 0 or 1")
        return bad

    def validate(self) -> None:
        bad = self.invalid_rows()
        if bad:
            i = min(bad)
            raise DataError(f"row {i}: {bad[i]}")

    def record(self, i: int) -> PersonYear:
        return PersonYear(
            person_id=str(self.person_id[i]),
            feature_year=int(self.feature_year[i]),
            spend_year=int(self.spend_year[i]),
            age_band=int(self.age_band[i]),
            sex=int(self.sex[i]),
            market=int(self.market[i]),
            hcc=tuple(int(v) for v in self.hcc[i]),
            components=tuple(int(v) for v in self.components[i]),
            spend=float(self.spend[i]),
        )

    def records(self) -> Iterator[PersonYear]:
        for i in range(len(self)):
            yield self.record(i)

    def take(self, index) -> "Panel":
        return Panel(self.profile, *(getattr(self, k)[index] for k in (
            "person_id", "feature_year", "spend_year", "age_band", "sex",
            "market", "hcc", "components", "spend")))

    @classmethod
    def from_records(cls, records: Sequence[PersonYear], profile: FormulaProfile) -> "Panel":
        for r in records:
            r.validate(profile)
        n = len(records)
        return cls(
            profile,
            np.array([r.person_id for r in records], dtype=object),
            np.array([r.feature_year for r in records], dtype=np.int64),
            np.array([r.spend_year for r in records], dtype=np.int64),
            np.array([r.age_band for r in records], dtype=np.int64),
            np.array([r.sex for r in records], dtype=np.int64),
            np.array([r.market for r in records], dtype=np.int64),
            np.array([r.hcc for r in records], dtype=np.uint8).reshape(n, profile.hcc_count),
            np.array([r.components for r in records], dtype=np.uint8).reshape(n, profile.n_components),
            np.array([r.spend for r in records], dtype=np.float64),
        )
