import os

import pytest

from ckp import detect as d
from ckp.errors import EnvConflict, InvalidDescriptor, UnresolvedDependency
from ckp.store import Store
from ckp.versions import VersionConstraint, parse_version
from oracles import brute_force_detect

FAKE = d.SoftDescriptor(
    soft_name="fake.tool",
    candidate_filenames=("faketool", "faketool-*"),
    version_command=("--version",),
    version_pattern=r"faketool (\S+)",
    env=(("FAKE_TOOL", "${INSTALL_PATH}"), ("FAKE_HOME", "${INSTALL_DIR}")),
)


def env(name, version, path, settings=()):
    return d.DetectedEnv(name, parse_version(version), path, list(settings))


@pytest.fixture
def tool_tree(tmp_path, tool_factory):
    root = tmp_path / "tools"
    tool_factory(root / "a" / "bin" / "faketool", "faketool 3.3")
    tool_factory(root / "b" / "bin" / "faketool", "faketool 3.6")
    tool_factory(root / "c" / "faketool-2.7", "faketool 2.7")
    tool_factory(root / "c" / "deep" / "er" / "faketool", "faketool 3.6")
    tool_factory(root / "d" / "faketool", "garbage output")          # no match
    tool_factory(root / "e" / "faketool", "faketool 9.9", exit_code=3)  # fails
    (root / "f").mkdir()
    (root / "f" / "faketool").write_text("not executable")
    tool_factory(root / "g" / "unrelated", "faketool 99")
    return root


def test_detection_matches_brute_force(tool_tree):
    got = d.detect(FAKE, [tool_tree], use_system_path=False)
    expected = brute_force_detect(FAKE.candidate_filenames, [tool_tree], ["--version"],
                                  FAKE.version_pattern)
    assert [(e.install_path, str(e.version)) for e in got] == expected
    assert [str(e.version) for e in got] == ["3.6", "3.6", "3.3", "2.7"]
    assert got[0].install_path < got[1].install_path


def test_detected_env_settings_rendered(tool_tree):
    top = d.detect(FAKE, [tool_tree], use_system_path=False)[0]
    assert dict(top.env_settings) == {"FAKE_TOOL": top.install_path,
                                      "FAKE_HOME": os.path.dirname(top.install_path)}
    assert set(top.platform_fingerprint) == {"os", "architecture", "hostname_hash"}


def test_nothing_found(tmp_path):
    assert d.detect(FAKE, [tmp_path], use_system_path=False) == []


def test_search_dirs_env(tool_tree, monkeypatch):
    monkeypatch.setenv("CKP_SEARCH_DIRS", str(tool_tree / "a"))
    assert [str(e.version) for e in d.detect(FAKE, use_system_path=False)] == ["3.3"]


def test_symlinked_dirs_deduplicated(tool_tree):
    os.symlink(tool_tree / "a" / "bin", tool_tree / "alias-bin")
    paths = [e.install_path for e in d.detect(FAKE, [tool_tree / "a", tool_tree / "alias-bin"],
                                              use_system_path=False)]
    assert len(paths) == 1


def test_system_path_scan(tool_tree, monkeypatch):
    monkeypatch.setenv("PATH", str(tool_tree / "b" / "bin"))
    got = d.detect(FAKE, [], use_system_path=True)
    assert [str(e.version) for e in got] == ["3.6"]


def test_descriptor_validation():
    with pytest.raises(InvalidDescriptor):
        d.SoftDescriptor("x", ("x",), version_pattern=r"(\d+)\.(\d+)")
    with pytest.raises(InvalidDescriptor):
        d.SoftDescriptor("x", ())
    with pytest.raises(InvalidDescriptor):
        d.SoftDescriptor.from_json({"candidate_filenames": ["x"]})
    assert d.SoftDescriptor.from_json(FAKE.to_json()) == FAKE


# -- resolution examples --------------------------------------------------------

DETECTED = [env("python", "2.7", "/opt/py27/python"), env("python", "3.3", "/opt/py33/python"),
            env("python", "3.6", "/opt/py36/python")]


def test_resolve_min():
    got = d.resolve_dependency("python", VersionConstraint.from_json({"min": "3.3"}), DETECTED)
    assert str(got.version) == "3.6"


def test_resolve_exact():
    got = d.resolve_dependency("python", VersionConstraint.from_json({"exact": "2.7"}), DETECTED)
    assert got.install_path == "/opt/py27/python"


def test_resolve_unsatisfiable():
    with pytest.raises(UnresolvedDependency) as info:
        d.resolve_dependency("python", VersionConstraint.from_json({"min": "10.0"}), DETECTED)
    assert len(info.value.details["candidates"]) == 3


def test_resolve_tie_goes_to_smallest_path():
    envs = [env("t", "1.0", "/z/t"), env("t", "1.0", "/a/t")]
    assert d.resolve_dependency("t", VersionConstraint(), envs).install_path == "/a/t"


def test_resolve_ignores_other_soft():
    with pytest.raises(UnresolvedDependency):
        d.resolve_dependency("ruby", VersionConstraint(), DETECTED)


# -- env scripts -----------------------------------------------------------------

def test_env_script_format():
    a = env("compiler.c", "11.4", "/usr/bin/gcc", [("CC", "/usr/bin/gcc")])
    b = env("python", "3.10", '/opt/we"ird/$py', [("PY", '/opt/we"ird/$py')])
    assert d.emit_env_script([a, b]) == (
        "# compiler.c 11.4\n"
        'export CC="/usr/bin/gcc"\n'
        "# python 3.10\n"
        'export PY="/opt/we\\"ird/\\$py"\n')


def test_env_script_conflict():
    a = env("x", "1", "/a", [("SHARED", "/a")])
    b = env("y", "1", "/b", [("SHARED", "/b")])
    with pytest.raises(EnvConflict):
        d.emit_env_script([a, b])
    # identical value is not a conflict
    c = env("z", "1", "/c", [("SHARED", "/a")])
    assert d.emit_env_script([a, c]).count("export SHARED") == 2


def test_env_overlay():
    a = env("x", "1", "/a", [("X_VAR", "1")])
    assert d.env_overlay([a], base={"PATH": "/bin"}) == {"PATH": "/bin", "X_VAR": "1"}


# -- store cache -------------------------------------------------------------------

def test_resolve_from_store_caches_and_refreshes(tmp_path, tool_tree):
    store = Store.at(tmp_path / "repo")
    d.add_descriptor(store, FAKE, alias="fake")
    got = d.resolve_from_store(store, "fake.tool", VersionConstraint.from_json({"min": "3.3"}),
                               search_roots=[tool_tree])
    assert str(got.version) == "3.6"
    assert len(d.env_entries(store, "fake.tool")) == 4
    # removing the winner from disk: cache drops it and the other 3.6 wins
    os.remove(got.install_path)
    again = d.resolve_from_store(store, "fake.tool", VersionConstraint.from_json({"min": "3.3"}))
    assert str(again.version) == "3.6" and again.install_path != got.install_path


def test_register_env_is_upsert(tmp_path):
    store = Store.at(tmp_path / "repo")
    e = env("t", "1.0", "/bin/sh")
    d.register_env(store, e)
    e.version = parse_version("2.0")
    d.register_env(store, e)
    assert [str(x.version) for x in d.cached_envs(store, "t")] == ["2.0"]


def test_find_descriptor_by_soft_name(tmp_path):
    store = Store.at(tmp_path / "repo")
    d.add_descriptor(store, FAKE, alias="fake")
    assert d.find_descriptor(store, "fake.tool")[1] == FAKE
    assert d.find_descriptor(store, "soft:fake")[1] == FAKE
