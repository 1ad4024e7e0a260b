import pytest
from hypothesis import given
from hypothesis import strategies as st

from group_audit.domain import (MARKETPLACES, MEDICARE, AuditConfig, ConfigError, ConflictingConstraint,
                                GroupSignature, PersonYear, DataError, canonicalize)


def test_canonicalize_sorts():
    assert canonicalize([(3, True), (1, True)]).constraints == ((1, True), (3, True))


def test_canonicalize_dedups():
    assert canonicalize([(2, False), (2, False), (7, True)]).constraints == ((2, False), (7, True))


def test_canonicalize_rejects_conflict():
    with pytest.raises(ConflictingConstraint):
        canonicalize([(4, True), (4, False)])


def test_empty_signature_rejected():
    with pytest.raises(ValueError):
        canonicalize([])


def test_non_canonical_construction_rejected():
    with pytest.raises(ValueError):
        GroupSignature(((3, True), (1, True)))


consistent = st.dictionaries(st.integers(0, 30), st.booleans(), min_size=1).flatmap(
    lambda d: st.permutations([kv for kv in d.items()] * 2))


@given(consistent)
def test_canonicalize_idempotent(raw):
    once = canonicalize(raw)
    assert canonicalize(once.constraints) == once


@given(consistent, st.randoms())
def test_canonicalize_permutation_invariant(raw, rnd):
    shuffled = list(raw)
    rnd.shuffle(shuffled)
    a, b = canonicalize(raw), canonicalize(shuffled)
    assert a == b
    assert a.to_bytes() == b.to_bytes()
    assert hash(a) == hash(b)


@given(consistent, consistent)
def test_bytes_equality_matches_signature_equality(a, b):
    sa, sb = canonicalize(a), canonicalize(b)
    assert (sa == sb) == (sa.to_bytes() == sb.to_bytes())


def test_encode_decode_roundtrip():
    labels = MARKETPLACES.component_labels
    sig = canonicalize([(labels.index("heart"), True), (labels.index("asthma"), True),
                        (labels.index("female"), False)])
    text = sig.encode(labels)
    assert text == "female:-&asthma:+&heart:+"
    assert GroupSignature.decode(text, labels) == sig


def test_profiles_match_published_layout():
    assert len(MARKETPLACES.age_bands) == 5
    assert MARKETPLACES.n_cells == 10
    assert MARKETPLACES.n_components == 18
    assert not MARKETPLACES.prospective
    assert len(MEDICARE.age_bands) == 4
    assert MEDICARE.n_cells == 8
    assert MEDICARE.prospective and MEDICARE.lag == 1


def test_audit_config_defaults():
    cfg = AuditConfig()
    assert (cfg.n_trees, cfg.mtry, cfg.tree_fraction_threshold) == (1000, 10, 0.01)
    assert set(cfg.settings) == {(100, 8), (100, 64), (10000, 8), (10000, 64)}


@pytest.mark.parametrize("kw", [dict(mtry=0), dict(mtry=19), dict(min_node_size=0),
                                dict(max_leaf_nodes=1), dict(tree_fraction_threshold=0.0),
                                dict(tree_fraction_threshold=1.5)])
def test_audit_config_rejects(kw):
    with pytest.raises(ConfigError):
        AuditConfig(**kw)


def test_person_year_invariants():
    ok = PersonYear("a", 2016, 2016, 0, 1, 3, (0,) * 12, (1,) + (0,) * 17, 10.0)
    ok.validate(MARKETPLACES)
    with pytest.raises(DataError):
        PersonYear("a", 2016, 2016, 0, 1, 3, (0,) * 12, (1,) + (0,) * 17, -1.0).validate(MARKETPLACES)
    with pytest.raises(DataError):
        PersonYear("a", 2016, 2016, 0, 1, 3, (0,) * 12, (1,) + (0,) * 17, 1.0).validate(MEDICARE)
    with pytest.raises(DataError):
        PersonYear("a", 2016, 2016, 5, 1, 3, (0,) * 12, (1,) + (0,) * 17, 1.0).validate(MARKETPLACES)
    with pytest.raises(DataError):
        PersonYear("a", 2016, 2016, 0, 1, 3, (0,) * 12, (1,) * 3, 1.0).validate(MARKETPLACES)
