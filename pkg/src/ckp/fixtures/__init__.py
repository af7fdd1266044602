"""Bundled demo repository: the ``hello-bench`` benchmark and its pipeline.

``repo/`` is generated by :func:`build` and committed; tests check that the
committed copy matches a fresh build.
"""
from __future__ import annotations

import gzip
import io
import shutil
import tarfile
from pathlib import Path

from ckp.store import Store

FIXTURE_ROOT = Path(__file__).parent / "repo"
PAYLOAD = Path(__file__).parent / "payload"

UIDS = {
    "soft:compiler-c": "00000000c0000001",
    "soft:python": "00000000c0000002",
    "program:hello-bench": "00000000a0000001",
    "pipeline:hello-bench": "00000000b0000001",
    "dataset:demo-data": "00000000d0000001",
    "package:demo-data": "00000000e0000001",
}

COMPILER = {
    "type": "descriptor",
    "soft_name": "compiler.c",
    "candidate_filenames": ["gcc", "clang", "icc", "cc"],
    "version_command": ["-dumpversion"],
    "version_pattern": r"^(\d+(?:\.\d+)*)",
    "extra_search_dirs": [],
    "env": [["CC", "${INSTALL_PATH}"]],
}

PYTHON = {
    "type": "descriptor",
    "soft_name": "python",
    "candidate_filenames": ["python3", "python"],
    "version_command": ["--version"],
    "version_pattern": r"Python (\d+(?:\.\d+)*)",
    "extra_search_dirs": [],
    "env": [["CKP_PYTHON", "${INSTALL_PATH}"]],
}

HELLO_PIPELINE = {
    "program": "program:hello-bench",
    "dependencies": [{"role": "compiler", "soft": "compiler.c", "min": "4.0"}],
    "compile": {"command": "${dep:compiler} ${choice:opt} -o bench bench.c", "artifact": "bench"},
    "run": {
        "command": "${artifact:bench} ${choice:iterations} ${choice:seed}",
        "repetitions": 3,
        "metrics_source": "stdout",
        "functional_keys": ["checksum"],
        "performance_keys": ["ops"],
    },
    "choices": {"opt": "-O2", "iterations": 40000000, "seed": 42},
    "tuning": {
        "dimensions": [
            {"key": "iterations", "values": [10000000, 20000000]},
            {"key": "opt", "values": ["-O0", "-O1", "-O2"]},
        ],
        "strategy": {"name": "exhaustive"},
        "objectives": [
            {"metric": "wall_time_s", "direction": "minimize", "statistic": "mean"},
            {"metric": "ops", "direction": "maximize", "statistic": "mean"},
        ],
    },
}


def demo_data_archive() -> bytes:
    """Deterministic .tar.gz of payload/demo-data (fixed mtimes and owners)."""
    raw = io.BytesIO()
    with tarfile.open(fileobj=raw, mode="w", format=tarfile.USTAR_FORMAT) as tar:
        for path in sorted((PAYLOAD / "demo-data").iterdir()):
            data = path.read_bytes()
            info = tarfile.TarInfo(f"demo-data/{path.name}")
            info.size = len(data)
            info.mode = 0o644
            info.mtime = 0
            tar.addfile(info, io.BytesIO(data))
    out = io.BytesIO()
    with gzip.GzipFile(fileobj=out, mode="wb", mtime=0) as gz:
        gz.write(raw.getvalue())
    return out.getvalue()


def demo_package_meta() -> dict:
    import hashlib

    return {
        "soft_name": "dataset.demo",
        "version": "1.0",
        "source": {"path": "demo-data.tar.gz",
                   "sha256": hashlib.sha256(demo_data_archive()).hexdigest()},
        "steps": [],
        "install_path": "${UNPACK_DIR}/demo-data",
        "env": [["CKP_DATASET_DEMO", "${UNPACK_DIR}/demo-data"]],
    }


def build(root: str | Path) -> Store:
    """Write the fixture repository under ``root`` (which must not exist yet)."""
    root = Path(root)
    store = Store.at(root, name="fixtures")
    add = store.add_entry
    add(None, "soft", "compiler-c", {"descriptor", "compiler"}, COMPILER,
        uid=UIDS["soft:compiler-c"])
    add(None, "soft", "python", {"descriptor"}, PYTHON, uid=UIDS["soft:python"])
    prog = add(None, "program", "hello-bench", {"demo", "bench", "c"}, {
        "language": "c",
        "description": "fixed-seed xorshift loop printing checksum and ops",
    }, uid=UIDS["program:hello-bench"])
    shutil.copy2(PAYLOAD / "hello-bench" / "bench.c", prog.data_path / "bench.c")
    add(None, "pipeline", "hello-bench", {"demo", "bench"}, HELLO_PIPELINE,
        uid=UIDS["pipeline:hello-bench"])
    ds = add(None, "dataset", "demo-data", {"demo"}, {"files": ["README.txt", "values.csv"]},
             uid=UIDS["dataset:demo-data"])
    for path in sorted((PAYLOAD / "demo-data").iterdir()):
        shutil.copy2(path, ds.data_path / path.name)
    pkg = add(None, "package", "demo-data", {"demo", "dataset"}, demo_package_meta(),
              uid=UIDS["package:demo-data"])
    (pkg.data_path / "demo-data.tar.gz").write_bytes(demo_data_archive())
    (root / ".ckp.lock").unlink(missing_ok=True)
    return store


def meta_snapshot(root: str | Path) -> dict[str, bytes]:
    """relative path -> bytes for every meta.json and alias-index under root."""
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.name in ("meta.json", "alias-index")}


__all__ = ["FIXTURE_ROOT", "build", "meta_snapshot"]
