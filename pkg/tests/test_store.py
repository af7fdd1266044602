import json
import multiprocessing as mp
import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ckp.errors import (
    AliasConflict,
    ImmutableRecord,
    InvalidAlias,
    InvalidKind,
    InvalidQuery,
    NotFound,
    StoreBusy,
    StoreError,
)
from ckp.store import (
    KINDS,
    Repository,
    Store,
    canonical_bytes,
    canonicalize,
    compile_pattern,
)

json_scalars = st.none() | st.booleans() | st.integers(-2**53, 2**53) | \
    st.floats(allow_nan=False, allow_infinity=False) | st.text(max_size=12)
json_docs = st.dictionaries(
    st.text(max_size=8),
    st.recursive(json_scalars, lambda inner: st.lists(inner, max_size=4)
                 | st.dictionaries(st.text(max_size=6), inner, max_size=4), max_leaves=12),
    max_size=6)


def test_add_entry_has_hex_uid_and_is_findable(store):
    e = store.add_entry(None, "program", alias="hello", tags={"demo"}, meta={})
    assert re.fullmatch(r"[0-9a-f]{16}", e.uid)
    assert store.load("program:hello").uid == e.uid
    assert store.load(f"program:{e.uid}").alias == "hello"
    assert (e.data_path / "meta.json").read_bytes() == b"{}\n"
    assert e.data_path.is_dir()


def test_duplicate_alias_conflicts(store):
    store.add_entry(None, "program", alias="hello")
    with pytest.raises(AliasConflict):
        store.add_entry(None, "program", alias="hello")


def test_alias_isolated_per_kind(store):
    a = store.add_entry(None, "program", alias="x")
    b = store.add_entry(None, "dataset", alias="x")
    assert store.load("program:x").uid == a.uid
    assert store.load("dataset:x").uid == b.uid


def test_hundred_uids_distinct(store):
    uids = [store.add_entry(None, "dataset").uid for _ in range(100)]
    assert len(set(uids)) == 100


def test_unknown_kind_rejected(store):
    with pytest.raises(InvalidKind):
        store.add_entry(None, "widget")
    with pytest.raises(InvalidKind):
        store.find_entries("widget")


@pytest.mark.parametrize("alias", ["Hello", "a b", "0123456789abcdef", "", "x/y"])
def test_bad_alias_rejected(store, alias):
    with pytest.raises(InvalidAlias):
        store.add_entry(None, "program", alias=alias)


def test_find_on_empty_store(store):
    assert store.find_entries("program", "*") == []


def test_find_by_tags_matches_linear_scan(store):
    a = store.add_entry(None, "program", "a", {"bench", "int"})
    b = store.add_entry(None, "program", "b", {"bench", "fp"})
    store.add_entry(None, "program", "c", {"other"})
    everything = list(store.iter_entries("program"))

    def scan(tags):
        return sorted(e.uid for e in everything if set(tags) <= e.tags)

    assert [e.uid for e in store.find_entries("program", tags={"bench"})] == scan({"bench"})
    assert {e.uid for e in store.find_entries("program", tags={"bench"})} == {a.uid, b.uid}
    assert [e.uid for e in store.find_entries("program", tags={"fp"})] == [b.uid]


def test_tags_lowercased(store):
    store.add_entry(None, "program", "t", {"MiXeD"})
    assert store.find_entries("program", tags={"mixed"})
    assert store.find_entries("program", tags={"MIXED"})


def test_wildcard_is_anchored(store):
    store.add_entry(None, "program", "hello")
    store.add_entry(None, "program", "shell")
    assert [e.alias for e in store.find_entries("program", "hel*")] == ["hello"]
    assert {e.alias for e in store.find_entries("program", "*ell*")} == {"hello", "shell"}
    assert store.find_entries("program", "ell") == []


@pytest.mark.parametrize("pattern", ["", "a?b", "x y", "[ab]"])
def test_malformed_pattern(store, pattern):
    with pytest.raises(InvalidQuery):
        store.find_entries("program", pattern)


def test_compile_pattern_escapes_dots():
    rx = compile_pattern("a.b*")
    assert rx.match("a.bc") and not rx.match("axbc")


def test_find_is_deterministic_and_sorted_by_uid(store):
    for i in range(20):
        store.add_entry(None, "dataset", f"d{i}")
    first = [e.uid for e in store.find_entries("dataset")]
    assert first == sorted(first)
    assert first == [e.uid for e in store.find_entries("dataset")]


def test_precedence_across_repositories(tmp_path):
    s = Store([Repository("one", tmp_path / "one"), Repository("two", tmp_path / "two")])
    late = s.add_entry("two", "program", "p")
    early = s.add_entry("one", "program", "p")
    assert s.load("program:p").uid == early.uid
    found = s.find_entries("program")
    assert [e.repo for e in found] == ["one", "two"]
    assert found[1].uid == late.uid


def test_repositories_cannot_share_root(tmp_path):
    with pytest.raises(StoreError):
        Store([Repository("a", tmp_path), Repository("b", tmp_path)])


def test_update_meta_round_trip(store):
    e = store.add_entry(None, "program", "p", meta={"old": True})
    store.update_meta(e, {"k": 1})
    assert store.load("program:p").meta == {"k": 1}
    assert (e.data_path / "meta.json").read_bytes() == b'{"k":1}\n'


def test_update_meta_on_removed_entry(store):
    e = store.add_entry(None, "program", "p")
    store.remove_entry(e)
    with pytest.raises(NotFound):
        store.update_meta(e, {"k": 1})


def test_experiments_are_immutable(store):
    e = store.add_entry(None, "experiment", meta={"a": 1})
    with pytest.raises(ImmutableRecord):
        store.update_meta(e, {"a": 2})


def test_remove_then_find_and_alias_reuse(store):
    e = store.add_entry(None, "program", "p")
    store.remove_entry(e)
    assert store.find_entries("program") == []
    with pytest.raises(NotFound):
        store.remove_entry(e)
    again = store.add_entry(None, "program", "p")
    assert again.uid != e.uid
    assert (again.data_path.parent / "alias-index").read_text() == f"p {again.uid}\n"


def test_alias_index_sorted(store):
    uids = {a: store.add_entry(None, "dataset", a).uid for a in ["zeta", "alpha", "mid"]}
    text = (store.repository(None).root / "dataset" / "alias-index").read_text()
    assert text == "".join(f"{a} {uids[a]}\n" for a in sorted(uids))


def _child_add(root, q):
    s = Store.at(root, lock_timeout=0.2)
    try:
        s.add_entry(None, "program")
        q.put("ok")
    except StoreBusy:
        q.put("busy")


def test_store_busy_when_lock_held(tmp_path):
    s = Store.at(tmp_path / "r")
    held = s.lock()
    ctx = mp.get_context("fork")
    q = ctx.Queue()
    with held:
        p = ctx.Process(target=_child_add, args=(tmp_path / "r", q))
        p.start()
        p.join(20)
        assert q.get(timeout=5) == "busy"
    p = ctx.Process(target=_child_add, args=(tmp_path / "r", q))
    p.start()
    p.join(20)
    assert q.get(timeout=5) == "ok"


def test_open_creates_default_registration(tmp_path, monkeypatch):
    monkeypatch.setenv("CKP_REPOS", str(tmp_path / "h" / "repos.json"))
    s = Store.open()
    assert [r.name for r in s.repos] == ["local", "fixtures"]
    assert s.load("pipeline:hello-bench").repo == "fixtures"


@given(json_docs)
@settings(max_examples=200, deadline=None)
def test_canonical_round_trip(doc):
    data = canonical_bytes(doc)
    assert canonical_bytes(json.loads(data)) == data
    assert data.endswith(b"\n") and not data.endswith(b"\n\n")
    assert canonicalize(doc) == json.loads(data)


def test_canonical_sorts_by_code_point():
    assert canonical_bytes({"b": 1, "a": 2, "B": 3, "é": 4}) == '{"B":3,"a":2,"b":1,"é":4}\n'.encode()


def test_kinds_closed_set():
    assert KINDS == ("program", "dataset", "soft", "package", "pipeline", "experiment")


def test_ten_thousand_generated_uids_distinct():
    from ckp.store import new_uid

    uids = {new_uid() for _ in range(10_000)}
    assert len(uids) == 10_000 and all(re.fullmatch(r"[0-9a-f]{16}", u) for u in uids)
