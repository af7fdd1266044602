"""Compile, run and measure pipelines.

``execute`` threads one ``PipelineState`` through four stages::

    resolve -> compile -> run -> aggregate

Commands are shell command lines with placeholders:

``${dep:<role>}``       install path of the resolved dependency
``${choice:<key>}``     effective choice value (defaults merged with overrides)
``${artifact:<name>}``  absolute path of a compile product
``${scratch}``          the per-execution working directory

Each execution gets a fresh scratch directory holding a copy of the program
payload; compile and run both happen there, so the stored program entry is
never written to.
"""
from __future__ import annotations

import json
import logging
import math
import os
import shutil
import statistics
import subprocess
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from ckp.detect import DetectedEnv, emit_env_script, env_overlay, resolve_from_store
from ckp.errors import (
    ArtifactMissing,
    CkpError,
    CompileFailed,
    InvalidPipeline,
    MetricsParseError,
    NonDeterministicFunctionalOutput,
    NotFound,
    RunFailed,
    UnresolvedDependency,
)
from ckp.store import INFO_FILE, META_FILE, Store
from ckp.templates import UnresolvedPlaceholder, placeholders, render
from ckp.versions import VersionConstraint

log = logging.getLogger(__name__)

SCRATCH_ENV = "CKP_SCRATCH"
WALL_TIME = "wall_time_s"
DEFAULT_REPETITIONS = 3
STAT_NAMES = ("min", "max", "mean", "median", "std", "count")


@dataclass(frozen=True)
class Dependency:
    role: str
    soft_name: str
    constraint: VersionConstraint = VersionConstraint()

    def to_json(self) -> dict[str, Any]:
        return {"role": self.role, "soft": self.soft_name, **self.constraint.to_json()}


@dataclass
class RunSpec:
    command: str
    repetitions: int = DEFAULT_REPETITIONS
    metrics_source: str = "stdout"  # "stdout" or the name of a metrics file
    functional_keys: tuple[str, ...] = ()
    performance_keys: tuple[str, ...] = ()
    timeout: float | None = None

    @property
    def all_performance_keys(self) -> tuple[str, ...]:
        keys = tuple(self.performance_keys)
        return keys if WALL_TIME in keys else (*keys, WALL_TIME)


@dataclass
class PipelineDefinition:
    program_ref: str
    run_spec: RunSpec
    dependencies: list[Dependency] = field(default_factory=list)
    compile_command: str | None = None
    compile_artifact: str | None = None
    choices: dict[str, Any] = field(default_factory=dict)
    tuning: dict[str, Any] = field(default_factory=dict)
    timing_insensitive: bool = False
    ref: str | None = None

    def __post_init__(self) -> None:
        self.validate()

    @classmethod
    def from_json(cls, doc: Mapping[str, Any], ref: str | None = None) -> "PipelineDefinition":
        try:
            run = doc["run"]
            source = run.get("metrics_source", "stdout")
            if isinstance(source, dict):
                source = source["file"]
            run_spec = RunSpec(
                command=run["command"],
                repetitions=int(run.get("repetitions", DEFAULT_REPETITIONS)),
                metrics_source=source,
                functional_keys=tuple(run.get("functional_keys", ())),
                performance_keys=tuple(run.get("performance_keys", ())),
                timeout=run.get("timeout"),
            )
            deps = [Dependency(d["role"], d["soft"], VersionConstraint.from_json(d))
                    for d in doc.get("dependencies", [])]
            comp = doc.get("compile") or {}
            return cls(
                program_ref=doc["program"],
                run_spec=run_spec,
                dependencies=deps,
                compile_command=comp.get("command"),
                compile_artifact=comp.get("artifact"),
                choices=dict(doc.get("choices", {})),
                tuning=dict(doc.get("tuning", {})),
                timing_insensitive=bool(doc.get("timing_insensitive", False)),
                ref=ref,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidPipeline(f"malformed pipeline definition: {exc!r}") from exc

    def to_json(self) -> dict[str, Any]:
        rs = self.run_spec
        doc: dict[str, Any] = {
            "program": self.program_ref,
            "dependencies": [d.to_json() for d in self.dependencies],
            "run": {
                "command": rs.command,
                "repetitions": rs.repetitions,
                "metrics_source": rs.metrics_source if rs.metrics_source == "stdout"
                else {"file": rs.metrics_source},
                "functional_keys": list(rs.functional_keys),
                "performance_keys": list(rs.performance_keys),
            },
            "choices": dict(self.choices),
        }
        if rs.timeout is not None:
            doc["run"]["timeout"] = rs.timeout
        if self.compile_command is not None:
            doc["compile"] = {"command": self.compile_command, "artifact": self.compile_artifact}
        if self.tuning:
            doc["tuning"] = self.tuning
        if self.timing_insensitive:
            doc["timing_insensitive"] = True
        return doc

    def validate(self) -> None:
        rs = self.run_spec
        if rs.repetitions < 1:
            raise InvalidPipeline("repetitions must be >= 1")
        overlap = set(rs.functional_keys) & set(rs.all_performance_keys)
        if overlap:
            raise InvalidPipeline(f"keys both functional and performance: {sorted(overlap)}")
        if (self.compile_command is None) != (self.compile_artifact is None):
            raise InvalidPipeline("compile needs both command and artifact")
        roles = [d.role for d in self.dependencies]
        if len(set(roles)) != len(roles):
            raise InvalidPipeline("duplicate dependency role")
        known = self.declared_placeholders()
        for cmd in filter(None, (self.compile_command, rs.command)):
            bad = sorted({p for p in placeholders(cmd) if p not in known})
            if bad:
                raise InvalidPipeline(f"undeclared placeholder(s) {bad} in {cmd!r}")

    def declared_placeholders(self) -> set[str]:
        names = {"scratch"}
        names.update(f"dep:{d.role}" for d in self.dependencies)
        names.update(f"choice:{k}" for k in self.choices)
        if self.compile_artifact:
            names.add(f"artifact:{self.compile_artifact}")
        return names

    def merge_choices(self, overrides: Mapping[str, Any] | None) -> dict[str, Any]:
        merged = dict(self.choices)
        for key, value in (overrides or {}).items():
            if key not in self.choices:
                raise InvalidPipeline(f"unknown choice {key!r}; declared: {sorted(self.choices)}",
                                      choice=key)
            merged[key] = coerce_choice(value, self.choices[key], key)
        return merged


def coerce_choice(value: Any, default: Any, key: str = "") -> Any:
    """Convert a CLI string to the type of the declared default."""
    if not isinstance(value, str) or isinstance(default, str) or default is None:
        return value
    try:
        if isinstance(default, bool):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise InvalidPipeline(f"choice {key!r}: cannot convert {value!r} to "
                              f"{type(default).__name__}") from None
    return value


def _choice_text(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


@dataclass
class PipelineState:
    pipeline_ref: str | None = None
    program_ref: str | None = None
    resolved_deps: dict[str, DetectedEnv] = field(default_factory=dict)
    effective_choices: dict[str, Any] = field(default_factory=dict)
    artifacts: dict[str, str] = field(default_factory=dict)
    per_repetition: list[dict[str, Any]] = field(default_factory=list)
    aggregated: dict[str, dict[str, float]] = field(default_factory=dict)
    functional: dict[str, Any] = field(default_factory=dict)
    commands: list[dict[str, Any]] = field(default_factory=list)
    stages: list[str] = field(default_factory=list)
    scratch: str | None = None
    status: str = "running"
    error: dict[str, Any] | None = None
    started: float = field(default_factory=time.time)
    finished: float | None = None

    @property
    def ok(self) -> bool:
        return self.status == "success"

    def to_json(self) -> dict[str, Any]:
        return {
            "pipeline_ref": self.pipeline_ref,
            "program_ref": self.program_ref,
            "resolved_deps": {role: env.to_json() for role, env in self.resolved_deps.items()},
            "effective_choices": self.effective_choices,
            "artifacts": self.artifacts,
            "per_repetition": self.per_repetition,
            "aggregated": self.aggregated,
            "functional": self.functional,
            "commands": self.commands,
            "stages": self.stages,
            "status": self.status,
            "error": self.error,
            "started": self.started,
            "finished": self.finished,
        }


def template_values(state: PipelineState, defn: PipelineDefinition) -> dict[str, str]:
    values = {"scratch": state.scratch or ""}
    values.update({f"dep:{role}": env.install_path for role, env in state.resolved_deps.items()})
    values.update({f"choice:{k}": _choice_text(v) for k, v in state.effective_choices.items()})
    values.update({f"artifact:{k}": v for k, v in state.artifacts.items()})
    return values


def _render(template: str, state: PipelineState, defn: PipelineDefinition) -> str:
    try:
        return render(template, template_values(state, defn))
    except UnresolvedPlaceholder as exc:
        raise InvalidPipeline(str(exc)) from None


def _shell(command: str, cwd: str, env: dict[str, str],
           timeout: float | None = None) -> tuple[subprocess.CompletedProcess[bytes], float]:
    t0 = time.monotonic()
    proc = subprocess.run(["/bin/sh", "-c", command], cwd=cwd, env=env, capture_output=True,
                          stdin=subprocess.DEVNULL, timeout=timeout)
    return proc, time.monotonic() - t0


def _tail(data: bytes, limit: int = 4000) -> str:
    return data.decode("utf-8", "replace")[-limit:]


def _envs(state: PipelineState) -> list[DetectedEnv]:
    return list(state.resolved_deps.values())


# -- stages --------------------------------------------------------------------

def resolve(defn: PipelineDefinition, store: Store, refresh: bool = False,
            state: PipelineState | None = None) -> PipelineState:
    state = state or PipelineState(defn.ref, defn.program_ref)
    for dep in defn.dependencies:
        try:
            state.resolved_deps[dep.role] = resolve_from_store(
                store, dep.soft_name, dep.constraint, refresh=refresh)
        except UnresolvedDependency as exc:
            exc.details["role"] = dep.role
            exc.message = f"{dep.role}: {exc.message}"
            exc.args = (exc.message,)
            raise
        except NotFound as exc:
            raise UnresolvedDependency(f"{dep.role}: {exc.message}", role=dep.role,
                                       soft_name=dep.soft_name) from exc
    state.stages.append("resolve")
    return state


def prepare_scratch(state: PipelineState, defn: PipelineDefinition, store: Store) -> PipelineState:
    program = store.load(defn.program_ref)
    state.program_ref = program.uid_ref
    root = os.environ.get(SCRATCH_ENV) or (str(store.home / "scratch") if store.home else None)
    if root:
        os.makedirs(root, exist_ok=True)
    scratch = tempfile.mkdtemp(prefix="run-", dir=root)
    for child in sorted(program.data_path.iterdir()):
        if child.name in (META_FILE, INFO_FILE):
            continue
        if child.is_dir():
            shutil.copytree(child, os.path.join(scratch, child.name))
        else:
            shutil.copy2(child, scratch)
    state.scratch = scratch
    Path(scratch, "env.sh").write_text(emit_env_script(_envs(state)), encoding="utf-8")
    return state


def compile(state: PipelineState, defn: PipelineDefinition) -> PipelineState:
    if defn.compile_command is None:
        return state
    cmd = _render(defn.compile_command, state, defn)
    proc, elapsed = _shell(cmd, state.scratch, env_overlay(_envs(state)))
    state.commands.append({
        "stage": "compile", "command": cmd, "exit_code": proc.returncode,
        "seconds": elapsed,
        "deps": {role: str(env.version) for role, env in state.resolved_deps.items()},
    })
    if proc.returncode != 0:
        raise CompileFailed(f"compile exited {proc.returncode}", exit_code=proc.returncode,
                            output=_tail(proc.stdout + proc.stderr))
    produced = Path(state.scratch, defn.compile_artifact)
    if not produced.exists():
        raise ArtifactMissing(f"compile succeeded but {defn.compile_artifact!r} was not produced",
                              artifact=defn.compile_artifact)
    state.artifacts[defn.compile_artifact] = str(produced)
    state.stages.append("compile")
    return state


def parse_metrics(text: str, repetition: int) -> dict[str, Any]:
    """Flat JSON object of string -> number | string."""
    try:
        doc = json.loads(text)
    except ValueError as exc:
        raise MetricsParseError(repetition, f"repetition {repetition}: not JSON: {exc}",
                                line=text[-200:]) from None
    if not isinstance(doc, dict):
        raise MetricsParseError(repetition, f"repetition {repetition}: metrics must be an object")
    for key, value in doc.items():
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            raise MetricsParseError(
                repetition, f"repetition {repetition}: metric {key!r} is not a number or string")
        if isinstance(value, float) and not math.isfinite(value):
            raise MetricsParseError(repetition, f"repetition {repetition}: metric {key!r} not finite")
    return doc


def _last_line(stdout: bytes) -> str:
    lines = [ln for ln in stdout.decode("utf-8", "replace").splitlines() if ln.strip()]
    return lines[-1] if lines else ""


def run(state: PipelineState, defn: PipelineDefinition) -> PipelineState:
    rs = defn.run_spec
    cmd = _render(rs.command, state, defn)
    env = env_overlay(_envs(state))
    for rep in range(rs.repetitions):
        metrics_file = None if rs.metrics_source == "stdout" else Path(state.scratch, rs.metrics_source)
        if metrics_file is not None and metrics_file.exists():
            metrics_file.unlink()
        try:
            proc, elapsed = _shell(cmd, state.scratch, env, rs.timeout)
        except subprocess.TimeoutExpired:
            raise RunFailed(rep, f"repetition {rep} timed out after {rs.timeout}s") from None
        state.commands.append({"stage": "run", "repetition": rep, "command": cmd,
                               "exit_code": proc.returncode})
        if proc.returncode != 0:
            raise RunFailed(rep, f"repetition {rep} exited {proc.returncode}",
                            exit_code=proc.returncode, output=_tail(proc.stdout + proc.stderr))
        if metrics_file is None:
            text = _last_line(proc.stdout)
        else:
            try:
                text = metrics_file.read_text(encoding="utf-8")
            except OSError as exc:
                raise MetricsParseError(rep, f"repetition {rep}: {exc}") from None
        metrics = parse_metrics(text, rep)
        for key in (*rs.functional_keys, *rs.performance_keys):
            if key == WALL_TIME:
                continue
            if key not in metrics:
                raise MetricsParseError(rep, f"repetition {rep}: metric {key!r} missing")
        for key in rs.performance_keys:
            if key != WALL_TIME and isinstance(metrics[key], str):
                raise MetricsParseError(rep, f"repetition {rep}: performance metric {key!r} "
                                             "is not numeric")
        metrics[WALL_TIME] = elapsed
        state.per_repetition.append(metrics)
    state.stages.append("run")
    return state


def summarize(values: Iterable[float]) -> dict[str, float]:
    """min/max/mean/median/population std/count; median is the lower middle."""
    xs = sorted(float(v) for v in values)
    if not xs:
        raise ValueError("no values")
    return {
        "min": xs[0],
        "max": xs[-1],
        "mean": statistics.mean(xs),
        "median": xs[(len(xs) - 1) // 2],
        "std": statistics.pstdev(xs),
        "count": len(xs),
    }


def aggregate(state: PipelineState, defn: PipelineDefinition) -> PipelineState:
    rs = defn.run_spec
    for key in rs.functional_keys:
        values = [m[key] for m in state.per_repetition]
        distinct = list(dict.fromkeys(json.dumps(v) for v in values))
        if len(distinct) > 1:
            raise NonDeterministicFunctionalOutput(key, [json.loads(v) for v in distinct])
        state.functional[key] = values[0]
    for key in rs.all_performance_keys:
        state.aggregated[key] = summarize(m[key] for m in state.per_repetition)
    state.stages.append("aggregate")
    return state


def execute(defn: PipelineDefinition, store: Store, overrides: Mapping[str, Any] | None = None,
            refresh: bool = False, keep_scratch: bool = False) -> PipelineState:
    """Run every stage. On failure the raised error carries the partial state as ``.state``."""
    state = PipelineState(defn.ref, defn.program_ref)
    try:
        state.effective_choices = defn.merge_choices(overrides)
        resolve(defn, store, refresh, state)
        prepare_scratch(state, defn, store)
        compile(state, defn)
        run(state, defn)
        aggregate(state, defn)
        state.status = "success"
    except CkpError as exc:
        state.status = "failed"
        state.error = exc.to_json()
        exc.state = state
        raise
    finally:
        state.finished = time.time()
        if state.scratch and not keep_scratch:
            shutil.rmtree(state.scratch, ignore_errors=True)
    return state


def load_pipeline(store: Store, ref: str) -> PipelineDefinition:
    entry = store.load(ref if ":" in ref else f"pipeline:{ref}")
    return PipelineDefinition.from_json(entry.meta, ref=entry.uid_ref)
