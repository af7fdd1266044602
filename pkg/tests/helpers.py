"""Builders for small stores with a scripted (compiler-free) pipeline."""
from __future__ import annotations

from pathlib import Path

from ckp import detect
from ckp.store import Store

RUNNER_BODY = r"""
mode="$1"
case "$mode" in
  ok) echo "warming up"; echo '{"checksum":"abc123","ops":5,"label":"x"}' ;;
  garbage) echo 'this is not json' ;;
  missing) echo '{"ops":5}' ;;
  fail) echo boom >&2; exit 3 ;;
  counter)
    n=$(cat count 2>/dev/null || echo 0); n=$((n+1)); echo $n > count
    echo "{\"checksum\":\"c$n\",\"ops\":$n}" ;;
  file) echo '{"checksum":"f","ops":7}' > metrics.json ;;
  perf)
    n=$(cat count 2>/dev/null || echo 0); n=$((n+1)); echo $n > count
    echo "{\"checksum\":\"same\",\"ops\":$((n*2))}" ;;
esac
"""

RUNNER = detect.SoftDescriptor(
    soft_name="runner",
    candidate_filenames=("runner",),
    version_command=("--version",),
    version_pattern=r"runner (\S+)",
    env=(("RUNNER", "${INSTALL_PATH}"),),
)


def runner_pipeline(**run_overrides) -> dict:
    run = {
        "command": "${dep:runner} ${choice:mode}",
        "repetitions": 3,
        "metrics_source": "stdout",
        "functional_keys": ["checksum"],
        "performance_keys": ["ops"],
    }
    run.update(run_overrides)
    return {
        "program": "program:script",
        "dependencies": [{"role": "runner", "soft": "runner", "min": "1.0"}],
        "run": run,
        "choices": {"mode": "ok", "level": 1},
        "tuning": {
            "dimensions": [{"key": "mode", "values": ["ok", "perf"]},
                           {"key": "level", "values": [1, 2, 3]}],
            "strategy": {"name": "exhaustive"},
            "objectives": [{"metric": "ops", "direction": "maximize", "statistic": "mean"}],
        },
    }


def scripted_store(root: Path, tool_dir: Path, make_tool, version: str = "1.5",
                   pipeline: dict | None = None) -> Store:
    """Store with a fake 'runner' tool, a program entry and pipeline:script."""
    make_tool(tool_dir / "runner", f"runner {version}", RUNNER_BODY)
    store = Store.at(root)
    detect.add_descriptor(store, RUNNER.__class__(**{**RUNNER.__dict__,
                                                     "extra_search_dirs": (str(tool_dir),)}),
                          alias="runner")
    prog = store.add_entry(None, "program", "script", {"demo"}, {"language": "sh"})
    (prog.data_path / "input.txt").write_text("payload\n")
    store.add_entry(None, "pipeline", "script", set(), pipeline or runner_pipeline())
    return store
