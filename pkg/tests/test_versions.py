import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ckp.errors import InvalidVersion
from ckp.versions import Version, VersionConstraint, parse_version
from oracles import version_cmp

token = st.one_of(st.integers(0, 30).map(str), st.sampled_from(["a", "b", "rc", "rc1", "beta", "x"]))
version_text = st.builds(
    lambda first, rest: first + "".join(sep + tok for sep, tok in rest),
    token,
    st.lists(st.tuples(st.sampled_from([".", "-"]), token), max_size=4),
)


def our_cmp(a, b):
    va, vb = parse_version(a), parse_version(b)
    return -1 if va < vb else (1 if va > vb else 0)


@pytest.mark.parametrize("a,b", [
    ("3.3", "3.6"), ("2.7", "3.3"), ("3.3", "3.3.1"), ("9.2", "10.0"),
    ("8.1-rc1", "8.1.0"), ("1.a", "1.0"), ("1.alpha", "1.beta"),
])
def test_examples_ascending(a, b):
    assert parse_version(a) < parse_version(b)
    assert parse_version(b) > parse_version(a)


def test_parse_components():
    assert parse_version("8.1-RC1").components == (8, 1, "rc1")
    assert parse_version(" 4.2 ").components == (4, 2)
    assert parse_version("007").components == (7,)
    assert parse_version("1.0") != parse_version("1")


@pytest.mark.parametrize("bad", ["", "   ", "1..2", ".1", "1.", "1 .2", "1-"])
def test_invalid(bad):
    with pytest.raises(InvalidVersion):
        parse_version(bad)


def test_str_round_trip():
    for text in ["1", "3.3.1", "8.1.rc1"]:
        assert str(parse_version(text)) == text


def test_constraint_semantics():
    c = VersionConstraint.from_json({"min": "3.3"})
    assert c.satisfied_by(parse_version("3.3")) and not c.satisfied_by(parse_version("3.2.9"))
    c = VersionConstraint.from_json({"min": "3.0", "max": "3.5"})
    assert c.satisfied_by(parse_version("3.5")) and not c.satisfied_by(parse_version("3.6"))
    c = VersionConstraint.from_json({"exact": "2.7"})
    assert c.satisfied_by(parse_version("2.7")) and not c.satisfied_by(parse_version("2.7.0"))
    assert VersionConstraint().satisfied_by(parse_version("0"))
    assert VersionConstraint.from_json({"min": "1", "max": "2"}).to_json() == {"min": "1", "max": "2"}


def test_constraint_rejects_inconsistent():
    with pytest.raises(InvalidVersion):
        VersionConstraint.from_json({"exact": "1", "min": "0"})
    with pytest.raises(InvalidVersion):
        VersionConstraint.from_json({"min": "3", "max": "2"})


def test_components_validated():
    with pytest.raises(InvalidVersion):
        Version([])
    with pytest.raises(InvalidVersion):
        Version([True])


@given(version_text, version_text)
@settings(max_examples=500, deadline=None)
def test_matches_oracle_and_antisymmetric(a, b):
    assert our_cmp(a, b) == version_cmp(a, b)
    assert our_cmp(a, b) == -our_cmp(b, a)


@given(version_text, version_text, version_text)
@settings(max_examples=500, deadline=None)
def test_transitive(a, b, c):
    if our_cmp(a, b) <= 0 and our_cmp(b, c) <= 0:
        assert our_cmp(a, c) <= 0


def random_versions(n, seed):
    rng = random.Random(seed)
    words = ["a", "b", "rc", "rc1", "beta", "dev", "x"]
    out = []
    for _ in range(n):
        k = rng.randint(1, 5)
        toks = [str(rng.randint(0, 12)) if rng.random() < 0.75 else rng.choice(words)
                for _ in range(k)]
        text = toks[0]
        for t in toks[1:]:
            text += rng.choice(".-") + t
        out.append(text)
    return out


def test_thousand_random_versions_total_order():
    texts = random_versions(1000, seed=20240611)
    ordered = sorted(texts, key=parse_version)
    # every pair in the sorted sequence agrees with the oracle: this is the
    # full antisymmetry + transitivity check over 10^6 pairs
    for i in range(len(ordered)):
        for j in range(i + 1, len(ordered)):
            assert version_cmp(ordered[i], ordered[j]) <= 0, (ordered[i], ordered[j])
