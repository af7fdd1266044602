"""Install missing software from declarative recipes.

A recipe names one source (local path or URL) with a mandatory sha256, an
optional list of build steps, and the environment the result exports.
Nothing reaches the component store unless the artifact digest verified
and every step exited zero.

Template variables in steps, ``install_path`` and ``env``: ``${PREFIX}``,
``${UNPACK_DIR}``, ``${ARTIFACT}``.
"""
from __future__ import annotations

import hashlib
import logging
import os
import re
import shutil
import subprocess
import tarfile
import tempfile
import time
import urllib.error
import urllib.parse
import urllib.request
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import filelock

from ckp.detect import (
    DetectedEnv,
    env_overlay,
    platform_fingerprint,
    register_env,
    render_env_settings,
    resolve_from_store,
)
from ckp.errors import (
    ChecksumMismatch,
    FetchError,
    InstallStepFailed,
    InvalidRecipe,
    StoreBusy,
    UnpackError,
)
from ckp.store import ComponentEntry, Store
from ckp.templates import UnresolvedPlaceholder, render
from ckp.versions import Version, VersionConstraint, parse_version

log = logging.getLogger(__name__)

SHA256_RE = re.compile(r"^[0-9a-f]{64}$")
FAILED_MARKER = ".failed"
LOCK_NAME = ".ckp-install.lock"
INSTALL_LOG = "install.log"


@dataclass
class PackageRecipe:
    soft_name: str
    provided_version: Version
    sha256: str
    url: str | None = None
    path: str | None = None
    steps: list[str | list[str]] = field(default_factory=list)
    env: list[tuple[str, str]] = field(default_factory=list)
    install_path: str = "${PREFIX}"
    dependencies: list[tuple[str, VersionConstraint]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not SHA256_RE.match(self.sha256 or ""):
            raise InvalidRecipe(f"{self.soft_name}: sha256 must be 64 lowercase hex characters")
        if (self.url is None) == (self.path is None):
            raise InvalidRecipe(f"{self.soft_name}: source needs exactly one of url or path")

    @classmethod
    def from_json(cls, doc: dict[str, Any], base_dir: str | os.PathLike[str] | None = None
                  ) -> "PackageRecipe":
        try:
            source = doc["source"]
            path = source.get("path")
            if path is not None and base_dir is not None and not os.path.isabs(path):
                path = os.path.join(base_dir, path)
            env = doc.get("env") or []
            if isinstance(env, dict):
                env = sorted(env.items())
            deps = [(d["soft"], VersionConstraint.from_json(d)) for d in doc.get("dependencies", [])]
            return cls(
                soft_name=doc["soft_name"],
                provided_version=parse_version(str(doc["version"])),
                sha256=source["sha256"],
                url=source.get("url"),
                path=path,
                steps=list(doc.get("steps", [])),
                env=[(str(k), str(v)) for k, v in env],
                install_path=doc.get("install_path", "${PREFIX}"),
                dependencies=deps,
            )
        except (KeyError, TypeError, AttributeError) as exc:
            raise InvalidRecipe(f"malformed package recipe: {exc!r}") from exc

    @property
    def artifact_name(self) -> str:
        if self.path is not None:
            return os.path.basename(self.path)
        name = os.path.basename(urllib.parse.urlparse(self.url or "").path)
        return name or "artifact"


def sha256_file(path: str | os.PathLike[str]) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def fetch(recipe: PackageRecipe, dest: str | os.PathLike[str]) -> Path:
    """Copy or download the recipe's artifact into ``dest`` and verify its digest."""
    dest = Path(dest)
    try:
        dest.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise FetchError(f"cannot create {dest}: {exc}") from exc
    final = dest / recipe.artifact_name
    if final.is_file():
        if sha256_file(final) == recipe.sha256:
            log.debug("reusing verified artifact %s", final)
            return final
        final.unlink()
    fd, tmp = tempfile.mkstemp(prefix=f".{final.name}.", suffix=".part", dir=dest)
    try:
        with os.fdopen(fd, "wb") as out:
            if recipe.path is not None:
                with open(recipe.path, "rb") as src:
                    shutil.copyfileobj(src, out)
            else:
                with urllib.request.urlopen(recipe.url, timeout=60) as src:
                    shutil.copyfileobj(src, out)
        digest = sha256_file(tmp)
        if digest != recipe.sha256:
            raise ChecksumMismatch(
                f"{recipe.artifact_name}: sha256 {digest} != expected {recipe.sha256}",
                expected=recipe.sha256, actual=digest)
        os.replace(tmp, final)
    except (OSError, urllib.error.URLError, ValueError) as exc:
        raise FetchError(f"cannot fetch {recipe.path or recipe.url}: {exc}") from exc
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return final


def unpack(artifact: Path, unpack_dir: Path) -> None:
    if unpack_dir.exists():
        shutil.rmtree(unpack_dir)
    unpack_dir.mkdir(parents=True)
    name = artifact.name.lower()
    try:
        if name.endswith((".tar.gz", ".tgz")):
            with tarfile.open(artifact, "r:gz") as tar:
                if hasattr(tarfile, "data_filter"):
                    tar.extractall(unpack_dir, filter="data")
                else:
                    tar.extractall(unpack_dir)
        elif name.endswith(".zip"):
            with zipfile.ZipFile(artifact) as zf:
                zf.extractall(unpack_dir)
        else:
            shutil.copy2(artifact, unpack_dir / artifact.name)
    except (tarfile.TarError, zipfile.BadZipFile, EOFError) as exc:
        raise UnpackError(f"cannot unpack {artifact.name}: {exc}", artifact=str(artifact)) from None


def _clean_failed(prefix: Path) -> None:
    log.info("previous install into %s failed; starting clean", prefix)
    for child in prefix.iterdir():
        if child.name in (LOCK_NAME, "download"):
            continue
        if child.is_dir() and not child.is_symlink():
            shutil.rmtree(child)
        else:
            child.unlink()


def run_steps(steps: Sequence[str | list[str]], values: dict[str, str], cwd: Path,
              env: dict[str, str], log_path: Path) -> None:
    with open(log_path, "a", encoding="utf-8") as logf:
        for index, step in enumerate(steps, start=1):
            try:
                argv = (["/bin/sh", "-c", render(step, values)] if isinstance(step, str)
                        else [render(a, values) for a in step])
            except UnresolvedPlaceholder as exc:
                raise InvalidRecipe(f"step {index}: {exc}") from None
            logf.write(f"$ {' '.join(argv)}\n")
            try:
                proc = subprocess.run(argv, cwd=cwd, env=env, capture_output=True,
                                      stdin=subprocess.DEVNULL)
                output = proc.stdout.decode("utf-8", "replace") + proc.stderr.decode("utf-8", "replace")
                code = proc.returncode
            except OSError as exc:
                output, code = str(exc), 127
            logf.write(output)
            logf.flush()
            if code != 0:
                raise InstallStepFailed(index, output,
                                        f"install step {index} exited {code}")


def install(recipe: PackageRecipe, prefix: str | os.PathLike[str], store: Store | None = None,
            repo: str | None = None, deps: Sequence[DetectedEnv] = (),
            lock_timeout: float = 60.0) -> DetectedEnv:
    """Fetch, unpack, build and register one recipe under ``prefix``."""
    prefix = Path(prefix).absolute()
    prefix.mkdir(parents=True, exist_ok=True)
    lock = filelock.FileLock(str(prefix / LOCK_NAME), timeout=lock_timeout)
    try:
        lock.acquire()
    except filelock.Timeout:
        raise StoreBusy(f"another install holds {prefix}") from None
    try:
        if (prefix / FAILED_MARKER).exists():
            _clean_failed(prefix)
        artifact = fetch(recipe, prefix / "download")
        unpack_dir = prefix / "unpack"
        unpack(artifact, unpack_dir)
        values = {"PREFIX": str(prefix), "UNPACK_DIR": str(unpack_dir), "ARTIFACT": str(artifact)}
        if store is not None and recipe.dependencies:
            deps = [*deps, *(resolve_from_store(store, soft, c) for soft, c in recipe.dependencies)]
        try:
            run_steps(recipe.steps, values, unpack_dir, env_overlay(list(deps)),
                      prefix / INSTALL_LOG)
        except InstallStepFailed:
            (prefix / FAILED_MARKER).write_text(time.strftime("%Y-%m-%dT%H:%M:%S\n"))
            raise
        try:
            install_path = render(recipe.install_path, values)
        except UnresolvedPlaceholder as exc:
            raise InvalidRecipe(f"install_path: {exc}") from None
        env = DetectedEnv(recipe.soft_name, recipe.provided_version, install_path,
                          render_env_settings(recipe.env, values, recipe.soft_name),
                          platform_fingerprint(), time.time(), origin="install")
        if store is not None:
            register_env(store, env, repo)
        return env
    finally:
        lock.release()


def load_recipe(entry: ComponentEntry) -> PackageRecipe:
    return PackageRecipe.from_json(entry.meta, base_dir=entry.data_path)


def default_prefix(store: Store, recipe: PackageRecipe) -> Path:
    home = store.home or Path.home() / ".ckp"
    name = re.sub(r"[^A-Za-z0-9._-]+", "_", f"{recipe.soft_name}-{recipe.provided_version}")
    return home / "install" / name


def install_package(store: Store, ref: str, prefix: str | os.PathLike[str] | None = None,
                    repo: str | None = None) -> DetectedEnv:
    entry = store.load(ref if ":" in ref else f"package:{ref}")
    recipe = load_recipe(entry)
    return install(recipe, prefix or default_prefix(store, recipe), store, repo)
