import dataclasses
from contextlib import contextmanager

import numpy as np
import pytest

from group_audit import synthgen
from group_audit.domain import MARKETPLACES, Panel, canonicalize

ACCEPTANCE = []


@contextmanager
def criterion(number, text):
    """Record a pass/fail line for an acceptance criterion."""
    try:
        yield
    except BaseException:
        ACCEPTANCE.append((number, "FAIL", text))
        raise
    ACCEPTANCE.append((number, "PASS", text))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, status, text in sorted(ACCEPTANCE, key=lambda t: t[0]):
        terminalreporter.write_line(f"[{status}] criterion {number}: {text}")


def planted_spec(n=20_000, noise_scale=3000.0, extra=8000.0, seed=11, **kw):
    p = MARKETPLACES
    sig = canonicalize([(p.component_index("asthma"), True), (p.component_index("heart"), True)])
    return synthgen.default_spec(
        n_persons=n, noise_scale=noise_scale, seed=seed,
        planted_interactions=(synthgen.PlantedInteraction(sig, extra),), **kw)


@pytest.fixture(scope="session")
def planted_panels():
    return synthgen.generate(planted_spec())


def make_panel(components, spend, market=None, age_band=None, sex=None, hcc=None, profile=MARKETPLACES,
               year=2016):
    """Hand-built panel; unspecified columns get neutral defaults."""
    components = np.asarray(components, dtype=np.uint8)
    n = len(spend)
    if components.shape[1] < profile.n_components:
        pad = np.zeros((n, profile.n_components - components.shape[1]), dtype=np.uint8)
        components = np.hstack([components, pad])
    return Panel(
        profile,
        np.array([f"p{i}" for i in range(n)], dtype=object),
        np.full(n, year - profile.lag, dtype=np.int64),
        np.full(n, year, dtype=np.int64),
        np.zeros(n, np.int64) if age_band is None else np.asarray(age_band, np.int64),
        np.zeros(n, np.int64) if sex is None else np.asarray(sex, np.int64),
        np.zeros(n, np.int64) if market is None else np.asarray(market, np.int64),
        np.zeros((n, profile.hcc_count), np.uint8) if hcc is None else np.asarray(hcc, np.uint8),
        components,
        np.asarray(spend, dtype=np.float64),
    )


replace = dataclasses.replace
