"""Filesystem-backed component repository.

Layout of one repository root::

    <root>/<kind>/<uid>/meta.json     canonical JSON meta document
    <root>/<kind>/<uid>/info.json     alias, tags, kind, uid, created
    <root>/<kind>/<uid>/...           payload files
    <root>/<kind>/alias-index         "alias uid" lines sorted by alias
    <root>/.ckp.lock                  writer lock

Readers take no locks. Writers serialize on the per-repository lock file and
publish every file with write-temp-then-rename, so a reader sees either the
old or the new document and never a torn one.
"""
from __future__ import annotations

import json
import logging
import os
import re
import secrets
import shutil
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator

import filelock

from ckp.errors import (
    AliasConflict,
    ImmutableRecord,
    InvalidAlias,
    InvalidKind,
    InvalidQuery,
    NotFound,
    StoreBusy,
    StoreError,
    StoreIoError,
)

log = logging.getLogger(__name__)

KINDS = ("program", "dataset", "soft", "package", "pipeline", "experiment")
IMMUTABLE_KINDS = frozenset({"experiment"})

UID_RE = re.compile(r"^[0-9a-f]{16}$")
ALIAS_RE = re.compile(r"^[a-z0-9._-]+$")
PATTERN_RE = re.compile(r"^[a-z0-9._*-]+$")

META_FILE = "meta.json"
INFO_FILE = "info.json"
ALIAS_INDEX = "alias-index"
LOCK_FILE = ".ckp.lock"

DEFAULT_HOME = Path("~/.ckp")
REPOS_ENV = "CKP_REPOS"


# canonical JSON

def canonical_bytes(doc: Any) -> bytes:
    """Serialize ``doc`` as sorted-key, compact, UTF-8 JSON ending in one LF."""
    text = json.dumps(doc, sort_keys=True, separators=(",", ":"),
                      ensure_ascii=False, allow_nan=False)
    return text.encode("utf-8") + b"\n"


def canonicalize(doc: Any) -> Any:
    return json.loads(canonical_bytes(doc))


def content_hash(doc: Any) -> str:
    import hashlib

    return hashlib.sha256(canonical_bytes(doc)).hexdigest()


def write_atomic(path: Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def new_uid() -> str:
    return secrets.token_bytes(8).hex()


def check_kind(kind: str) -> str:
    if kind not in KINDS:
        raise InvalidKind(f"unknown module kind {kind!r}; expected one of {', '.join(KINDS)}",
                          kind=kind)
    return kind


def check_alias(alias: str) -> str:
    if not ALIAS_RE.match(alias) or UID_RE.match(alias):
        raise InvalidAlias(f"invalid alias {alias!r}", alias=alias)
    return alias


def compile_pattern(pattern: str) -> re.Pattern[str]:
    """Anchored wildcard: ``*`` matches any run of characters, nothing else is special."""
    if not pattern or not PATTERN_RE.match(pattern):
        raise InvalidQuery(f"malformed name pattern {pattern!r}", pattern=pattern)
    return re.compile("^" + ".*".join(re.escape(p) for p in pattern.split("*")) + "$")


def split_ref(ref: str) -> tuple[str, str | None]:
    """``"program:hello"`` -> ``("program", "hello")``; ``"program"`` -> ``("program", None)``."""
    kind, sep, name = ref.partition(":")
    check_kind(kind)
    return kind, (name or None) if sep else None


@dataclass(frozen=True)
class Repository:
    name: str
    root: Path

    def kind_dir(self, kind: str) -> Path:
        return self.root / kind

    def to_json(self) -> dict[str, str]:
        return {"name": self.name, "root": str(self.root)}


@dataclass
class ComponentEntry:
    repo: str
    module_kind: str
    uid: str
    alias: str | None
    tags: frozenset[str]
    meta: dict[str, Any]
    data_path: Path
    created: float = 0.0

    @property
    def ref(self) -> str:
        return f"{self.module_kind}:{self.alias or self.uid}"

    @property
    def uid_ref(self) -> str:
        return f"{self.module_kind}:{self.uid}"

    def to_json(self, with_meta: bool = True) -> dict[str, Any]:
        out: dict[str, Any] = {
            "repo": self.repo,
            "kind": self.module_kind,
            "uid": self.uid,
            "alias": self.alias,
            "tags": sorted(self.tags),
            "path": str(self.data_path),
        }
        if with_meta:
            out["meta"] = self.meta
        return out


@dataclass
class Store:
    """Ordered set of repositories; lookups consult them in list order."""

    repos: list[Repository]
    lock_timeout: float = 10.0
    home: Path | None = None
    _by_name: dict[str, Repository] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        roots = [r.root.resolve() for r in self.repos]
        if len(set(roots)) != len(roots):
            raise StoreError("two repositories share a root directory")
        names = [r.name for r in self.repos]
        if len(set(names)) != len(names):
            raise StoreError("duplicate repository name")
        self._by_name = {r.name: r for r in self.repos}

    # -- construction -----------------------------------------------------

    @classmethod
    def open(cls, config_path: str | os.PathLike[str] | None = None, **kw: Any) -> "Store":
        """Load the registration file named by ``CKP_REPOS`` (default ``~/.ckp/repos.json``).

        A missing file is created with a ``local`` repository beside it and the
        bundled read-only ``fixtures`` repository.
        """
        if config_path is None:
            config_path = os.environ.get(REPOS_ENV) or DEFAULT_HOME / "repos.json"
        path = Path(config_path).expanduser()
        if not path.exists():
            from ckp.fixtures import FIXTURE_ROOT

            path.parent.mkdir(parents=True, exist_ok=True)
            doc = {"repos": [
                {"name": "local", "root": str(path.parent / "local")},
                {"name": "fixtures", "root": str(FIXTURE_ROOT)},
            ]}
            write_atomic(path, canonical_bytes(doc))
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
            entries = doc["repos"]
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise StoreIoError(f"cannot read repository file {path}: {exc}") from exc
        repos = []
        for item in entries:
            root = Path(item["root"]).expanduser()
            if not root.is_absolute():
                root = path.parent / root
            repos.append(Repository(item["name"], root))
        return cls(repos, home=path.parent, **kw)

    @classmethod
    def at(cls, root: str | os.PathLike[str], name: str = "local", **kw: Any) -> "Store":
        """Single-repository store, handy for tests and scripts."""
        return cls([Repository(name, Path(root))], home=Path(root).parent, **kw)

    # -- repositories -------------------------------------------------------

    @property
    def default_repo(self) -> str:
        if not self.repos:
            raise StoreError("no repositories registered")
        return self.repos[0].name

    def repository(self, name: str | None) -> Repository:
        name = name or self.default_repo
        try:
            return self._by_name[name]
        except KeyError:
            raise StoreError(f"unknown repository {name!r}", repo=name) from None

    def lock(self, repo: str | None = None) -> filelock.BaseFileLock:
        r = self.repository(repo)
        try:
            r.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise StoreIoError(f"cannot create repository root {r.root}: {exc}") from exc
        return filelock.FileLock(str(r.root / LOCK_FILE), timeout=self.lock_timeout)

    def _locked(self, repo: str | None) -> "_WriterLock":
        return _WriterLock(self.lock(repo), self.repository(repo).name)

    # -- writes ------------------------------------------------------------

    def add_entry(self, repo: str | None, module_kind: str, alias: str | None = None,
                  tags: Iterable[str] = (), meta: dict[str, Any] | None = None,
                  uid: str | None = None) -> ComponentEntry:
        check_kind(module_kind)
        if alias is not None:
            check_alias(alias)
        if uid is not None and not UID_RE.match(uid):
            raise StoreError(f"invalid uid {uid!r}")
        r = self.repository(repo)
        meta = {} if meta is None else meta
        data = canonical_bytes(meta)
        tagset = frozenset(t.lower() for t in tags)
        with self._locked(r.name):
            kdir = r.kind_dir(module_kind)
            try:
                kdir.mkdir(parents=True, exist_ok=True)
            except OSError as exc:
                raise StoreIoError(f"cannot write under {kdir}: {exc}") from exc
            index = self._read_index(r, module_kind)
            if alias is not None and alias in index:
                raise AliasConflict(f"alias {alias!r} already used for {module_kind} in {r.name}",
                                    alias=alias, kind=module_kind, repo=r.name)
            if uid is None:
                uid = new_uid()
                while (kdir / uid).exists():
                    uid = new_uid()
            elif (kdir / uid).exists():
                raise StoreError(f"uid {uid} already exists", uid=uid)
            created = time.time()
            info = {"alias": alias, "created": created, "kind": module_kind,
                    "tags": sorted(tagset), "uid": uid}
            staging = Path(tempfile.mkdtemp(prefix=f".{uid}.", dir=kdir))
            try:
                write_atomic(staging / META_FILE, data)
                write_atomic(staging / INFO_FILE, canonical_bytes(info))
                os.replace(staging, kdir / uid)
            except OSError as exc:
                shutil.rmtree(staging, ignore_errors=True)
                raise StoreIoError(f"cannot write entry {uid}: {exc}") from exc
            if alias is not None:
                index[alias] = uid
                self._write_index(r, module_kind, index)
        log.debug("added %s:%s (%s) to %s", module_kind, alias or uid, uid, r.name)
        return ComponentEntry(r.name, module_kind, uid, alias, tagset,
                              json.loads(data), kdir / uid, created)

    def update_meta(self, entry: ComponentEntry, new_meta: dict[str, Any]) -> ComponentEntry:
        if entry.module_kind in IMMUTABLE_KINDS:
            raise ImmutableRecord(f"{entry.module_kind} entries are immutable", uid=entry.uid)
        data = canonical_bytes(new_meta)
        r = self.repository(entry.repo)
        path = r.kind_dir(entry.module_kind) / entry.uid
        with self._locked(r.name):
            if not (path / INFO_FILE).is_file():
                raise NotFound(f"entry {entry.uid_ref} not found", ref=entry.uid_ref)
            try:
                write_atomic(path / META_FILE, data)
            except OSError as exc:
                raise StoreIoError(f"cannot write meta for {entry.uid}: {exc}") from exc
        entry.meta = json.loads(data)
        return entry

    def remove_entry(self, entry: ComponentEntry | str) -> dict[str, str]:
        if isinstance(entry, str):
            entry = self.load(entry)
        r = self.repository(entry.repo)
        kdir = r.kind_dir(entry.module_kind)
        path = kdir / entry.uid
        with self._locked(r.name):
            if not (path / INFO_FILE).is_file():
                raise NotFound(f"entry {entry.uid_ref} not found", ref=entry.uid_ref)
            index = self._read_index(r, entry.module_kind)
            stale = [a for a, u in index.items() if u == entry.uid]
            for a in stale:
                del index[a]
            if stale:
                self._write_index(r, entry.module_kind, index)
            trash = kdir / f".{entry.uid}.removed"
            os.replace(path, trash)
            shutil.rmtree(trash, ignore_errors=True)
        return {"removed": entry.uid_ref, "repo": r.name}

    # -- reads -------------------------------------------------------------

    def load(self, ref: str, module_kind: str | None = None) -> ComponentEntry:
        """Resolve ``kind:alias-or-uid`` (or a bare name plus ``module_kind``)."""
        if module_kind is None:
            module_kind, name = split_ref(ref)
        else:
            check_kind(module_kind)
            name = ref
        if not name:
            raise NotFound(f"no entry name in {ref!r}", ref=ref)
        for r in self.repos:
            uid = name if UID_RE.match(name) else self._read_index(r, module_kind).get(name)
            if uid and (r.kind_dir(module_kind) / uid / INFO_FILE).is_file():
                return self._load_dir(r, module_kind, uid)
        raise NotFound(f"{module_kind}:{name} not found", ref=f"{module_kind}:{name}")

    def exists(self, ref: str) -> bool:
        try:
            self.load(ref)
        except NotFound:
            return False
        return True

    def find_entries(self, module_kind: str, name_pattern: str = "*",
                     tags: Iterable[str] = ()) -> list[ComponentEntry]:
        check_kind(module_kind)
        rx = compile_pattern(name_pattern)
        want = {t.lower() for t in tags}
        out = []
        for entry in self.iter_entries(module_kind):
            names = [entry.uid] + ([entry.alias] if entry.alias else [])
            if not any(rx.match(n) for n in names):
                continue
            if want <= entry.tags:
                out.append(entry)
        return out

    def iter_entries(self, module_kind: str) -> Iterator[ComponentEntry]:
        check_kind(module_kind)
        for r in self.repos:
            kdir = r.kind_dir(module_kind)
            if not kdir.is_dir():
                continue
            for uid in sorted(os.listdir(kdir)):
                if UID_RE.match(uid) and (kdir / uid / INFO_FILE).is_file():
                    try:
                        yield self._load_dir(r, module_kind, uid)
                    except NotFound:
                        continue  # removed between listdir and load

    def read_meta_bytes(self, entry: ComponentEntry) -> bytes:
        return (entry.data_path / META_FILE).read_bytes()

    def _load_dir(self, r: Repository, module_kind: str, uid: str) -> ComponentEntry:
        check_kind(module_kind)
        path = r.kind_dir(module_kind) / uid
        try:
            info = json.loads((path / INFO_FILE).read_bytes())
            meta = json.loads((path / META_FILE).read_bytes())
        except FileNotFoundError:
            raise NotFound(f"{module_kind}:{uid} not found") from None
        except (OSError, ValueError) as exc:
            raise StoreIoError(f"corrupt entry {path}: {exc}") from exc
        if info.get("kind") != module_kind:
            raise InvalidKind(f"entry {path} declares kind {info.get('kind')!r}")
        return ComponentEntry(r.name, module_kind, uid, info.get("alias"),
                              frozenset(info.get("tags", ())), meta, path,
                              info.get("created", 0.0))

    def _read_index(self, r: Repository, module_kind: str) -> dict[str, str]:
        try:
            text = (r.kind_dir(module_kind) / ALIAS_INDEX).read_text(encoding="utf-8")
        except FileNotFoundError:
            return {}
        index = {}
        for line in text.splitlines():
            alias, _, uid = line.partition(" ")
            if alias and uid:
                index[alias] = uid
        return index

    def _write_index(self, r: Repository, module_kind: str, index: dict[str, str]) -> None:
        text = "".join(f"{a} {index[a]}\n" for a in sorted(index))
        write_atomic(r.kind_dir(module_kind) / ALIAS_INDEX, text.encode("utf-8"))


class _WriterLock:
    def __init__(self, lock: filelock.BaseFileLock, name: str) -> None:
        self._lock = lock
        self._name = name

    def __enter__(self) -> None:
        try:
            self._lock.acquire()
        except filelock.Timeout:
            raise StoreBusy(f"repository {self._name!r} is locked by another writer",
                            repo=self._name) from None
        except OSError as exc:
            raise StoreIoError(f"cannot lock repository {self._name!r}: {exc}") from exc

    def __exit__(self, *exc: object) -> None:
        self._lock.release()
