import numpy as np
import pytest

from group_audit import riskfit, synthgen
from group_audit.domain import MARKETPLACES, DataError, EmptyPanel, FormulaProfile
from group_audit.riskfit import DegenerateDesign, DesignSpec, Misalignment

from conftest import make_panel, planted_spec
from oracles import dummy_ols

TINY = FormulaProfile("custom", ("a",), 1, ("a_ind", "female", "arthritis"))


def test_two_column_hand_solved():
    """Six rows, one market, design = {cell, hcc}; check against the 2x2 normal equations."""
    spend = np.array([100.0, 250.0, 175.0, 400.0, 90.0, 330.0])
    sex = np.array([0, 1, 0, 1, 0, 1])
    hcc = np.array([[0], [1], [1], [0], [0], [1]])
    comps = np.column_stack([np.ones(6), sex, hcc[:, 0]])
    panel = make_panel(comps, spend, sex=sex, hcc=hcc, profile=TINY)
    res = riskfit.fit(panel)
    # cells (M, F) span the constant, so with one market one of them is absorbed;
    # the remaining design after demeaning is {cell_M, hcc}.
    assert res.columns == ["cell_a_M", "hcc_0"]
    assert res.dropped_columns == ["cell_a_F"]
    x1 = (sex == 0).astype(float)
    x1 -= x1.mean()
    x2 = hcc[:, 0] - hcc[:, 0].mean()
    y = spend - spend.mean()
    a, b, c = x1 @ x1, x1 @ x2, x2 @ x2
    d1, d2 = x1 @ y, x2 @ y
    det = a * c - b * b
    beta = np.array([(c * d1 - b * d2) / det, (a * d2 - b * d1) / det])
    np.testing.assert_allclose(res.beta, beta, rtol=1e-12)


def test_constant_spend_gives_zero_residuals():
    panel = synthgen.generate(synthgen.GeneratorSpec(n_persons=3000, years=(2016,), base_spend=5000.0,
                                                     market_count=7, market_effects=(0.0,) * 7))[2016]
    assert np.all(panel.spend == 5000.0)
    res = riskfit.fit(panel)
    np.testing.assert_allclose(res.predictions, 5000.0, atol=1e-9)
    np.testing.assert_allclose(res.residuals, 0.0, atol=1e-9)


def test_constant_non_integer_spend():
    comps = np.zeros((40, 18), np.uint8)
    rng = np.random.default_rng(1)
    panel = make_panel(comps, np.full(40, 1234.56), market=rng.integers(0, 3, 40),
                       age_band=rng.integers(0, 5, 40), sex=rng.integers(0, 2, 40),
                       hcc=rng.integers(0, 2, (40, 12)))
    res = riskfit.fit(panel)
    np.testing.assert_allclose(res.predictions, 1234.56, atol=1e-9)
    np.testing.assert_allclose(res.residuals, 0.0, atol=1e-9)


def test_zero_noise_exact_fit():
    panel = synthgen.generate(synthgen.default_spec(n_persons=50_000, years=(2016,)))[2016]
    assert np.max(np.abs(riskfit.fit(panel).residuals)) < 1e-6


def test_invariants_on_noisy_panel(planted_panels):
    panel = planted_panels[2016]
    res = riskfit.fit(panel)
    np.testing.assert_array_equal(res.residuals, res.predictions - panel.spend)
    X = DesignSpec.from_profile(MARKETPLACES).matrix(panel)
    markets, inv = np.unique(panel.market, return_inverse=True)
    Xd, _ = riskfit.demean(X, inv, len(markets))
    R = res.residuals
    names = DesignSpec.from_profile(MARKETPLACES).column_names
    for name in res.columns:
        x = Xd[:, names.index(name)]
        assert abs(x @ R) / (np.linalg.norm(x) * np.linalg.norm(R) + 1e-300) < 1e-8
    for m in markets:
        assert abs(R[panel.market == m].mean()) < 1e-6
    assert 0 < res.r_squared < 1


def test_fwl_matches_explicit_dummies():
    rng = np.random.default_rng(42)
    for trial in range(10):
        n = int(rng.integers(50, 500))
        n_markets = int(rng.integers(1, 6))
        comps = np.zeros((n, 18), np.uint8)
        panel = make_panel(comps, rng.gamma(2.0, 3000.0, n).round(2), market=rng.integers(0, n_markets, n),
                           age_band=rng.integers(0, 5, n), sex=rng.integers(0, 2, n),
                           hcc=(rng.random((n, 12)) < 0.3))
        res = riskfit.fit(panel)
        design = DesignSpec.from_profile(MARKETPLACES)
        names = design.column_names
        keep = [names.index(c) for c in res.columns]
        X = design.matrix(panel)[:, keep]
        beta, fitted = dummy_ols(X, panel.spend, panel.market)
        np.testing.assert_allclose(res.beta, beta, rtol=0, atol=1e-8 * max(1.0, np.abs(beta).max()))
        np.testing.assert_allclose(res.predictions, fitted, atol=1e-6)


def test_collinear_columns_drop_highest_index():
    rng = np.random.default_rng(3)
    n = 200
    hcc = (rng.random((n, 12)) < 0.3).astype(np.uint8)
    hcc[:, 5] = hcc[:, 2]  # duplicate
    hcc[:, 9] = 0  # empty
    panel = make_panel(np.zeros((n, 18)), rng.gamma(2, 1000, n).round(2), age_band=rng.integers(0, 5, n),
                       sex=rng.integers(0, 2, n), hcc=hcc, market=rng.integers(0, 3, n))
    res = riskfit.fit(panel)
    assert "hcc_2" in res.columns
    assert "hcc_5" in res.dropped_columns and "hcc_9" in res.dropped_columns
    assert "cell_60-65_F" in res.dropped_columns


def test_singleton_market_residual_is_zero():
    rng = np.random.default_rng(5)
    n = 100
    market = rng.integers(0, 3, n)
    market[17] = 99
    panel = make_panel(np.zeros((n, 18)), rng.gamma(2, 1000, n).round(2), market=market,
                       age_band=rng.integers(0, 5, n), sex=rng.integers(0, 2, n), hcc=rng.random((n, 12)) < 0.2)
    res = riskfit.fit(panel)
    assert res.singleton_markets == 1
    assert abs(res.residuals[17]) < 1e-9


def test_sign_convention_underprediction_negative():
    spend = [3000.0, 7000.0, 9000.0]
    panel = make_panel(np.zeros((3, 18)), spend, age_band=[0, 0, 1])
    res = riskfit.fit(panel)
    assert res.predictions[1] == pytest.approx(5000.0)
    assert res.residuals[1] == pytest.approx(-2000.0)


def test_empty_and_degenerate():
    with pytest.raises(EmptyPanel):
        riskfit.fit(make_panel(np.zeros((0, 18)), []))
    with pytest.raises(DegenerateDesign):
        riskfit.fit(make_panel(np.zeros((4, 18)), [1.0, 2.0, 3.0, 4.0]))


def test_mixed_years_rejected():
    panel = make_panel(np.zeros((2, 18)), [1.0, 2.0], age_band=[0, 1])
    mixed = type(panel)(panel.profile, panel.person_id, np.array([2016, 2017]), np.array([2016, 2017]),
                        panel.age_band, panel.sex, panel.market, panel.hcc, panel.components, panel.spend)
    with pytest.raises(DataError):
        riskfit.fit(mixed)


def test_residual_by_condition_zero():
    panel = synthgen.generate(synthgen.default_spec(n_persons=2000, years=(2016,)))[2016]
    res = riskfit.fit(panel)
    res = riskfit.FitResult(2016, res.columns, res.beta, [], res.predictions, np.zeros(len(panel)), 1.0)
    table = riskfit.residual_by_condition(res, panel)
    assert len(table) == 12
    assert (table[["mean_absent", "mean_present"]].to_numpy() == 0).all()


def test_residual_by_condition_direct_means():
    n = 10
    comps = np.zeros((n, 18), np.uint8)
    arth = MARKETPLACES.component_index("arthritis")
    comps[:4, arth] = 1
    panel = make_panel(comps, [0.0] * n)
    r = np.where(comps[:, arth] == 1, -100.0, 10.0)
    fit = riskfit.FitResult(2016, [], np.zeros(0), [], panel.spend + r, r, 0.0)
    row = riskfit.residual_by_condition(fit, panel).set_index("condition").loc["arthritis"]
    assert (row.mean_absent, row.mean_present) == (10.0, -100.0)


def test_residual_by_condition_matches_regrouping():
    panel = synthgen.generate(planted_spec(n=8000, years=(2016,), hcc_map=tuple(range(6, 18))[:12]))[2016]
    res = riskfit.fit(panel)
    table = riskfit.residual_by_condition(res, panel, components=["asthma", "heart", "female"]).set_index("condition")
    for label in ("asthma", "heart", "female"):
        j = MARKETPLACES.component_index(label)
        yes = [r for r, c in zip(res.residuals, panel.components[:, j]) if c == 1]
        no = [r for r, c in zip(res.residuals, panel.components[:, j]) if c == 0]
        assert table.loc[label, "mean_present"] == pytest.approx(sum(yes) / len(yes), rel=1e-9, abs=1e-6)
        assert table.loc[label, "mean_absent"] == pytest.approx(sum(no) / len(no), rel=1e-9, abs=1e-6)


def test_residual_by_condition_misaligned():
    panel = make_panel(np.zeros((3, 18)), [1.0, 2.0, 3.0], age_band=[0, 1, 1])
    res = riskfit.fit(panel)
    with pytest.raises(Misalignment):
        riskfit.residual_by_condition(res, panel.take(slice(0, 2)))
