"""Risk-adjustment regression with absorbed market fixed effects.

The formula regresses annual spend on Age x Sex cells and HCC indicators
and absorbs the market by within-market demeaning. Residuals follow the
payment convention ``R = predicted - observed``: a negative residual means
the formula underpays for that person.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
import scipy.linalg

from .domain import DataError, EmptyPanel, FormulaProfile, Panel

COLLINEAR_TOL = 1e-9
RIDGE_JITTER = 1e-10


class DegenerateDesign(DataError):
    pass


class Misalignment(DataError):
    pass


@dataclass(frozen=True)
class DesignSpec:
    """Design columns: one indicator per Age x Sex cell, then each HCC.

    There is no intercept: the cells partition the sample, and the market
    effects absorb the constant anyway.
    """

    age_bands: tuple[str, ...]
    hcc_count: int

    @classmethod
    def from_profile(cls, profile: FormulaProfile) -> "DesignSpec":
        return cls(profile.age_bands, profile.hcc_count)

    @property
    def n_cells(self) -> int:
        return 2 * len(self.age_bands)

    @property
    def column_names(self) -> list[str]:
        cells = [f"cell_{band}_{sex}" for band in self.age_bands for sex in ("M", "F")]
        return cells + [f"hcc_{j}" for j in range(self.hcc_count)]

    def matrix(self, panel: Panel) -> np.ndarray:
        n = len(panel)
        X = np.zeros((n, self.n_cells + self.hcc_count))
        X[np.arange(n), panel.cells] = 1.0
        X[:, self.n_cells:] = panel.hcc
        return X


@dataclass(frozen=True, eq=False)
class FitResult:
    year: int
    columns: list[str]
    beta: np.ndarray
    dropped_columns: list[str]
    predictions: np.ndarray = field(repr=False)
    residuals: np.ndarray = field(repr=False)
    r_squared: float
    n_markets: int = 0
    singleton_markets: int = 0
    used_jitter: bool = False

    @property
    def coefficients(self) -> dict[str, float]:
        return dict(zip(self.columns, self.beta.tolist()))


def demean(values: np.ndarray, groups: np.ndarray, n_groups: int) -> tuple[np.ndarray, np.ndarray]:
    """Subtract group means; returns ``(demeaned, means)``."""
    counts = np.bincount(groups, minlength=n_groups).astype(np.float64)
    if values.ndim == 1:
        means = np.bincount(groups, weights=values, minlength=n_groups) / counts
    else:
        means = np.column_stack([np.bincount(groups, weights=values[:, j], minlength=n_groups)
                                 for j in range(values.shape[1])]) / counts[:, None]
    return values - means[groups], means


def retained_columns(gram: np.ndarray, tol: float = COLLINEAR_TOL) -> list[int]:
    """Greedy left-to-right rank selection on a Gram matrix.

    A column is kept when its squared distance from the span of the columns
    already kept exceeds ``tol`` times its squared norm, so among collinear
    columns the lowest indices survive.
    """
    keep: list[int] = []
    L = np.zeros((0, 0))
    scale = max(float(np.max(np.diag(gram), initial=0.0)), 1.0)
    for j in range(gram.shape[0]):
        gjj = gram[j, j]
        if gjj <= tol * scale:
            continue
        if keep:
            v = scipy.linalg.solve_triangular(L, gram[keep, j], lower=True)
            d = gjj - v @ v
        else:
            v, d = np.zeros(0), gjj
        if d <= tol * gjj:
            continue
        k = len(keep)
        L2 = np.zeros((k + 1, k + 1))
        L2[:k, :k] = L
        L2[k, :k] = v
        L2[k, k] = np.sqrt(d)
        L = L2
        keep.append(j)
    return keep


def _solve_normal(gram: np.ndarray, rhs: np.ndarray):
    try:
        factor = scipy.linalg.cho_factor(gram, lower=True)
        jitter = False
    except np.linalg.LinAlgError:
        factor = scipy.linalg.cho_factor(gram + RIDGE_JITTER * np.eye(len(gram)), lower=True)
        jitter = True
    return scipy.linalg.cho_solve(factor, rhs), factor, jitter


def fit(panel: Panel, design: DesignSpec | None = None) -> FitResult:
    """Least-squares fit of spend on the design plus market fixed effects.

    Raises
    ------
    EmptyPanel
        No rows.
    DegenerateDesign
        Every design column is collinear with the market effects or empty.
    """
    if len(panel) == 0:
        raise EmptyPanel("cannot fit an empty panel")
    pairs = np.unique(np.column_stack([panel.feature_year, panel.spend_year]), axis=0)
    if len(pairs) != 1:
        raise DataError("panel mixes several (feature_year, spend_year) pairs; fit one year at a time")
    design = design or DesignSpec.from_profile(panel.profile)
    names = design.column_names

    X = design.matrix(panel)
    y = np.asarray(panel.spend, dtype=np.float64)
    markets, inv = np.unique(panel.market, return_inverse=True)
    counts = np.bincount(inv)
    Xd, Xbar = demean(X, inv, len(markets))
    yd, ybar = demean(y, inv, len(markets))

    gram = Xd.T @ Xd
    keep = retained_columns(gram)
    if not keep:
        raise DegenerateDesign("no design column survives fixed-effect absorption")
    G = gram[np.ix_(keep, keep)]
    Xk = Xd[:, keep]
    beta, jitter = _refined_solve(G, Xk, yd)

    alpha = ybar - Xbar[:, keep] @ beta
    predictions = X[:, keep] @ beta + alpha[inv]
    residuals = predictions - y
    sst = float(np.sum((y - y.mean()) ** 2))
    ssr = float(residuals @ residuals)
    r2 = 1.0 - ssr / sst if sst > 0 else 1.0

    return FitResult(
        year=int(panel.spend_year[0]),
        columns=[names[j] for j in keep],
        beta=beta,
        dropped_columns=[names[j] for j in range(len(names)) if j not in keep],
        predictions=predictions,
        residuals=residuals,
        r_squared=r2,
        n_markets=len(markets),
        singleton_markets=int(np.sum(counts == 1)),
        used_jitter=jitter,
    )


def _refined_solve(G, X, y):
    beta, factor, jitter = _solve_normal(G, X.T @ y)
    # one round of iterative refinement against the data, not the Gram matrix
    delta = scipy.linalg.cho_solve(factor, X.T @ (y - X @ beta))
    return beta + delta, jitter


def condition_labels(profile: FormulaProfile) -> list[str]:
    n_bands = len(profile.age_bands)
    return [lab for lab in profile.component_labels[n_bands:] if lab != "female"]


def residual_by_condition(result: FitResult, panel: Panel,
                          components: Sequence[str] | None = None) -> pd.DataFrame:
    """Mean residual among persons without / with each condition."""
    if len(result.residuals) != len(panel):
        raise Misalignment(f"fit has {len(result.residuals)} rows, panel has {len(panel)}")
    if len(panel) and int(panel.spend_year[0]) != result.year:
        raise Misalignment(f"fit is for {result.year}, panel for {int(panel.spend_year[0])}")
    labels = panel.profile.component_labels
    components = list(components) if components is not None else condition_labels(panel.profile)
    rows = []
    r = result.residuals
    for label in components:
        present = panel.components[:, labels.index(label)] == 1
        n_yes = int(present.sum())
        n_no = len(r) - n_yes
        rows.append({
            "condition": label,
            "mean_absent": float(r[~present].mean()) if n_no else np.nan,
            "mean_present": float(r[present].mean()) if n_yes else np.nan,
            "n_absent": n_no,
            "n_present": n_yes,
        })
    return pd.DataFrame(rows, columns=["condition", "mean_absent", "mean_present", "n_absent", "n_present"])
