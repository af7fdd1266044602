"""Native software detection, dependency resolution and env scripts.

A soft descriptor says which file names to look for and how to make a
candidate print its version. ``detect`` walks the search roots (recursively)
and the directories of ``PATH`` (flat), runs every candidate with the
version command, and keeps the ones whose output matches the pattern.
"""
from __future__ import annotations

import fnmatch
import hashlib
import logging
import os
import platform
import re
import socket
import subprocess
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from ckp.errors import (
    EnvConflict,
    InvalidDescriptor,
    InvalidVersion,
    NotFound,
    UnresolvedDependency,
)
from ckp.store import ComponentEntry, Store
from ckp.templates import UnresolvedPlaceholder, render
from ckp.versions import Version, VersionConstraint, parse_version

log = logging.getLogger(__name__)

SEARCH_DIRS_ENV = "CKP_SEARCH_DIRS"
PROBE_TIMEOUT = 10.0
ENV_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


def platform_fingerprint() -> dict[str, str]:
    host = hashlib.sha256(socket.gethostname().encode("utf-8")).hexdigest()[:16]
    return {"os": platform.system().lower(), "architecture": platform.machine().lower(),
            "hostname_hash": host}


def default_env_var(soft_name: str) -> str:
    return "CKP_ENV_" + re.sub(r"[^A-Za-z0-9]+", "_", soft_name).upper().strip("_")


@dataclass(frozen=True)
class SoftDescriptor:
    soft_name: str
    candidate_filenames: tuple[str, ...]
    version_command: tuple[str, ...] = ("--version",)
    version_pattern: str = r"(\d+(?:\.\d+)+)"
    extra_search_dirs: tuple[str, ...] = ()
    env: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        if not self.soft_name:
            raise InvalidDescriptor("soft_name is empty")
        if not self.candidate_filenames:
            raise InvalidDescriptor(f"{self.soft_name}: candidate_filenames is empty")
        try:
            groups = re.compile(self.version_pattern).groups
        except re.error as exc:
            raise InvalidDescriptor(f"{self.soft_name}: bad version_pattern: {exc}") from exc
        if groups != 1:
            raise InvalidDescriptor(
                f"{self.soft_name}: version_pattern needs exactly one capture group, has {groups}")

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> "SoftDescriptor":
        try:
            cmd = doc.get("version_command", ["--version"])
            if isinstance(cmd, str):
                cmd = cmd.split()
            env = doc.get("env") or []
            if isinstance(env, dict):
                env = sorted(env.items())
            return cls(
                soft_name=doc["soft_name"],
                candidate_filenames=tuple(doc["candidate_filenames"]),
                version_command=tuple(cmd),
                version_pattern=doc.get("version_pattern", cls.version_pattern),
                extra_search_dirs=tuple(doc.get("extra_search_dirs", ())),
                env=tuple((str(k), str(v)) for k, v in env),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidDescriptor(f"malformed soft descriptor: {exc}") from exc

    def to_json(self) -> dict[str, Any]:
        return {
            "type": "descriptor",
            "soft_name": self.soft_name,
            "candidate_filenames": list(self.candidate_filenames),
            "version_command": list(self.version_command),
            "version_pattern": self.version_pattern,
            "extra_search_dirs": list(self.extra_search_dirs),
            "env": [list(kv) for kv in self.env],
        }


@dataclass
class DetectedEnv:
    soft_name: str
    version: Version
    install_path: str
    env_settings: list[tuple[str, str]] = field(default_factory=list)
    platform_fingerprint: dict[str, str] = field(default_factory=dict)
    detected_at: float = 0.0
    origin: str = "detect"

    def to_json(self) -> dict[str, Any]:
        return {
            "soft_name": self.soft_name,
            "version": str(self.version),
            "install_path": self.install_path,
            "env_settings": [list(kv) for kv in self.env_settings],
            "platform_fingerprint": dict(self.platform_fingerprint),
            "detected_at": self.detected_at,
            "origin": self.origin,
        }

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> "DetectedEnv":
        return cls(
            soft_name=doc["soft_name"],
            version=parse_version(doc["version"]),
            install_path=doc["install_path"],
            env_settings=[(k, v) for k, v in doc.get("env_settings", [])],
            platform_fingerprint=dict(doc.get("platform_fingerprint", {})),
            detected_at=doc.get("detected_at", 0.0),
            origin=doc.get("origin", "detect"),
        )


def render_env_settings(template: Iterable[tuple[str, str]], values: dict[str, str],
                        soft_name: str) -> list[tuple[str, str]]:
    settings = []
    for name, tmpl in template:
        if not ENV_NAME_RE.match(name):
            raise InvalidDescriptor(f"{soft_name}: invalid environment variable name {name!r}")
        try:
            settings.append((name, render(tmpl, values)))
        except UnresolvedPlaceholder as exc:
            raise InvalidDescriptor(f"{soft_name}: {exc}") from None
    return settings


# -- detection ---------------------------------------------------------------

def search_roots_from_env() -> list[str]:
    raw = os.environ.get(SEARCH_DIRS_ENV, "")
    return [p for p in raw.split(os.pathsep) if p]


def _matches(name: str, patterns: Sequence[str]) -> bool:
    return any(fnmatch.fnmatchcase(name, p) for p in patterns)


def find_candidates(soft: SoftDescriptor, search_roots: Iterable[str | os.PathLike[str]],
                    use_system_path: bool = True) -> list[str]:
    """Every file matching a candidate name under the roots or on PATH, deduplicated."""
    seen: set[str] = set()
    found: list[str] = []

    def consider(dirpath: str, name: str) -> None:
        path = os.path.join(dirpath, name)
        key = os.path.join(os.path.realpath(dirpath), name)
        if key in seen or not os.path.isfile(path):
            return
        seen.add(key)
        found.append(path)

    for root in search_roots:
        root = os.path.abspath(os.fspath(root))
        if os.path.isfile(root):
            if _matches(os.path.basename(root), soft.candidate_filenames):
                consider(os.path.dirname(root), os.path.basename(root))
            continue
        for dirpath, dirnames, filenames in os.walk(root):
            dirnames.sort()
            for name in sorted(filenames):
                if _matches(name, soft.candidate_filenames):
                    consider(dirpath, name)
    if use_system_path:
        for d in os.environ.get("PATH", "").split(os.pathsep):
            if not d or not os.path.isdir(d):
                continue
            try:
                names = sorted(os.listdir(d))
            except OSError:
                continue
            for name in names:
                if _matches(name, soft.candidate_filenames):
                    consider(os.path.abspath(d), name)
    return found


def probe(soft: SoftDescriptor, path: str, timeout: float = PROBE_TIMEOUT) -> Version | None:
    """Run one candidate with the version command; None when it fails or does not match."""
    if not os.access(path, os.X_OK):
        log.info("skip %s: not executable", path)
        return None
    args = [render(a, {"INSTALL_PATH": path}) for a in soft.version_command]
    try:
        proc = subprocess.run([path, *args], capture_output=True, timeout=timeout,
                              stdin=subprocess.DEVNULL)
    except (OSError, subprocess.SubprocessError) as exc:
        log.info("skip %s: %s", path, exc)
        return None
    if proc.returncode != 0:
        log.info("skip %s: version command exited %d", path, proc.returncode)
        return None
    output = proc.stdout.decode("utf-8", "replace") + "\n" + proc.stderr.decode("utf-8", "replace")
    m = re.search(soft.version_pattern, output, re.MULTILINE)
    if not m:
        log.info("skip %s: version pattern did not match", path)
        return None
    try:
        return parse_version(m.group(1))
    except InvalidVersion:
        log.info("skip %s: unparsable version %r", path, m.group(1))
        return None


def sort_envs(envs: Iterable[DetectedEnv]) -> list[DetectedEnv]:
    """Descending version, then ascending install path."""
    out = sorted(envs, key=lambda e: e.install_path)
    out.sort(key=lambda e: e.version, reverse=True)
    return out


def detect(soft: SoftDescriptor, search_roots: Iterable[str | os.PathLike[str]] = (),
           use_system_path: bool = True, timeout: float = PROBE_TIMEOUT,
           max_workers: int = 8) -> list[DetectedEnv]:
    roots = [*search_roots_from_env(), *search_roots, *soft.extra_search_dirs]
    candidates = find_candidates(soft, roots, use_system_path)
    if not candidates:
        return []
    fingerprint = platform_fingerprint()
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        versions = list(pool.map(lambda p: probe(soft, p, timeout), candidates))
    envs = []
    for path, version in zip(candidates, versions):
        if version is None:
            continue
        values = {"INSTALL_PATH": path, "INSTALL_DIR": os.path.dirname(path),
                  "VERSION": str(version)}
        template = soft.env or ((default_env_var(soft.soft_name), "${INSTALL_PATH}"),)
        envs.append(DetectedEnv(soft.soft_name, version, path,
                                render_env_settings(template, values, soft.soft_name),
                                fingerprint, time.time()))
    return sort_envs(envs)


# -- resolution ----------------------------------------------------------------

def resolve_dependency(soft_name: str, constraint: VersionConstraint,
                       detected: Sequence[DetectedEnv]) -> DetectedEnv:
    """Highest version satisfying ``constraint``; ties go to the smallest install path."""
    ok = [e for e in detected if e.soft_name == soft_name and constraint.satisfied_by(e.version)]
    if not ok:
        raise UnresolvedDependency(
            f"no {soft_name} satisfies {constraint}",
            soft_name=soft_name, constraint=constraint.to_json(),
            candidates=[{"version": str(e.version), "install_path": e.install_path}
                        for e in detected])
    return sort_envs(ok)[0]


def _shell_quote(value: str) -> str:
    return '"' + re.sub(r'(["\\$`])', r"\\\1", value) + '"'


def emit_env_script(envs: Sequence[DetectedEnv]) -> str:
    owner: dict[str, tuple[str, str]] = {}
    lines = []
    for env in envs:
        lines.append(f"# {env.soft_name} {env.version}")
        for name, value in env.env_settings:
            if name in owner and owner[name][1] != value:
                raise EnvConflict(
                    f"{name} set by both {owner[name][0]} and {env.soft_name}",
                    variable=name, softs=[owner[name][0], env.soft_name])
            owner.setdefault(name, (env.soft_name, value))
            lines.append(f"export {name}={_shell_quote(value)}")
    return "".join(line + "\n" for line in lines)


def env_overlay(envs: Sequence[DetectedEnv], base: dict[str, str] | None = None) -> dict[str, str]:
    """Process environment equivalent to sourcing ``emit_env_script(envs)``."""
    emit_env_script(envs)  # conflict check
    out = dict(os.environ if base is None else base)
    for env in envs:
        out.update(env.env_settings)
    return out


# -- store integration -----------------------------------------------------------

ENV_TAG = "env"
DESCRIPTOR_TAG = "descriptor"


def add_descriptor(store: Store, soft: SoftDescriptor, alias: str | None = None,
                   repo: str | None = None, tags: Iterable[str] = ()) -> ComponentEntry:
    return store.add_entry(repo, "soft", alias=alias, tags={DESCRIPTOR_TAG, *tags},
                           meta=soft.to_json())


def find_descriptor(store: Store, name: str) -> tuple[ComponentEntry, SoftDescriptor]:
    """Look up a descriptor by ``soft:<ref>``, alias/uid, or soft_name."""
    ref = name if name.startswith("soft:") else f"soft:{name}"
    try:
        entry = store.load(ref)
        if entry.meta.get("type") == "descriptor":
            return entry, SoftDescriptor.from_json(entry.meta)
    except NotFound:
        pass
    for entry in store.iter_entries("soft"):
        if entry.meta.get("type") == "descriptor" and entry.meta.get("soft_name") == name:
            return entry, SoftDescriptor.from_json(entry.meta)
    raise NotFound(f"no soft descriptor named {name!r}", ref=name)


def env_entries(store: Store, soft_name: str) -> list[ComponentEntry]:
    return [e for e in store.iter_entries("soft")
            if e.meta.get("type") == "env" and e.meta["env"]["soft_name"] == soft_name]


def cached_envs(store: Store, soft_name: str) -> list[DetectedEnv]:
    """Registered installations whose files still exist."""
    envs = [DetectedEnv.from_json(e.meta["env"]) for e in env_entries(store, soft_name)]
    return sort_envs(e for e in envs if os.path.exists(e.install_path))


def register_env(store: Store, env: DetectedEnv, repo: str | None = None) -> ComponentEntry:
    """Insert or refresh the cache entry keyed by (soft_name, install_path)."""
    meta = {"type": "env", "env": env.to_json()}
    for entry in env_entries(store, env.soft_name):
        if entry.meta["env"]["install_path"] == env.install_path:
            return store.update_meta(entry, meta)
    return store.add_entry(repo, "soft", tags={ENV_TAG}, meta=meta)


def detect_and_cache(store: Store, soft: SoftDescriptor,
                     search_roots: Iterable[str | os.PathLike[str]] = (),
                     use_system_path: bool = True, repo: str | None = None) -> list[DetectedEnv]:
    envs = detect(soft, search_roots, use_system_path)
    found = {e.install_path for e in envs}
    for entry in env_entries(store, soft.soft_name):
        env = entry.meta["env"]
        if env.get("origin", "detect") == "detect" and env["install_path"] not in found:
            store.remove_entry(entry)
    for env in envs:
        register_env(store, env, repo)
    return envs


def resolve_from_store(store: Store, soft_name: str, constraint: VersionConstraint,
                       refresh: bool = False, search_roots: Iterable[str] = (),
                       repo: str | None = None) -> DetectedEnv:
    """Resolve over cached detections, detecting when the cache is empty or stale."""
    envs = [] if refresh else cached_envs(store, soft_name)
    if envs:
        try:
            return resolve_dependency(soft_name, constraint, envs)
        except UnresolvedDependency:
            pass
    _, soft = find_descriptor(store, soft_name)
    detect_and_cache(store, soft, search_roots, repo=repo)
    return resolve_dependency(soft_name, constraint, cached_envs(store, soft_name))
