from __future__ import annotations

import json
import shutil
import stat
from pathlib import Path

import pytest

from ckp.fixtures import FIXTURE_ROOT
from ckp.store import Store


@pytest.fixture(autouse=True)
def _isolate_env(tmp_path, monkeypatch):
    # never touch ~/.ckp from tests
    monkeypatch.setenv("CKP_REPOS", str(tmp_path / "ckp-home" / "repos.json"))
    monkeypatch.setenv("CKP_SCRATCH", str(tmp_path / "scratch"))
    monkeypatch.delenv("CKP_SEARCH_DIRS", raising=False)


@pytest.fixture
def store(tmp_path) -> Store:
    return Store.at(tmp_path / "repo")


@pytest.fixture
def empty_cli_store(tmp_path, monkeypatch) -> Store:
    """Registration file pointing at a single empty repository."""
    home = tmp_path / "empty-home"
    home.mkdir()
    (home / "repos.json").write_text(json.dumps({"repos": [{"name": "local", "root": "local"}]}))
    monkeypatch.setenv("CKP_REPOS", str(home / "repos.json"))
    return Store.open()


@pytest.fixture
def fixture_store(tmp_path, monkeypatch) -> Store:
    """Writable copy of the bundled fixture repo behind an empty local repo."""
    home = tmp_path / "ckp-home"
    home.mkdir(exist_ok=True)
    shutil.copytree(FIXTURE_ROOT, home / "fixtures")
    (home / "repos.json").write_text(json.dumps({"repos": [
        {"name": "local", "root": str(home / "local")},
        {"name": "fixtures", "root": str(home / "fixtures")},
    ]}))
    monkeypatch.setenv("CKP_REPOS", str(home / "repos.json"))
    return Store.open()


def make_tool(path: Path, version_line: str, body: str = "", exit_code: int = 0) -> Path:
    """Executable shell script printing ``version_line`` for --version."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        "#!/bin/sh\n"
        'if [ "$1" = "--version" ]; then\n'
        f"  echo '{version_line}'\n"
        f"  exit {exit_code}\n"
        "fi\n"
        f"{body}\n"
    )
    path.chmod(path.stat().st_mode | stat.S_IXUSR | stat.S_IXGRP | stat.S_IXOTH)
    return path


@pytest.fixture
def tool_factory():
    return make_tool


def have_c_compiler() -> bool:
    return any(shutil.which(c) for c in ("gcc", "clang", "cc", "icc"))


requires_cc = pytest.mark.skipif(not have_c_compiler(), reason="no C compiler on PATH")


# -- acceptance summary -------------------------------------------------------------

ACCEPTANCE: dict[int, tuple[str, str]] = {}


class _Criterion:
    def __init__(self, number: int, title: str) -> None:
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self) -> "_Criterion":
        ACCEPTANCE[self.number] = ("FAIL", self.title + " (did not finish)")
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        status = "PASS" if exc_type is None else "FAIL"
        text = self.title + (f": {self.detail}" if self.detail else "")
        if exc_type is not None:
            text += f" [{exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}]"
        ACCEPTANCE[self.number] = (status, text)
        print(f"ACCEPTANCE {self.number} {status} {text}")
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        status, text = ACCEPTANCE[number]
        terminalreporter.write_line(f"ACCEPTANCE {number} {status} {text}")
