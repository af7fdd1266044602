"""Experiment records, replay, tolerance comparison and reproducibility badges.

Records are immutable ``experiment`` entries whose meta carries a
``content_hash`` over the rest of the document. Validation reports are
stored the same way and reference both experiments they compare.
"""
from __future__ import annotations

import json
import logging
import math
import re
import time
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

from ckp.detect import platform_fingerprint
from ckp.errors import (
    CkpError,
    IncomparableExperiments,
    MissingComponent,
    NotFound,
)
from ckp.pipeline import PipelineDefinition, PipelineState, execute
from ckp.store import ComponentEntry, Store, content_hash

log = logging.getLogger(__name__)

RECORD = "record"
EXPLORATION = "exploration"
REPORT = "validation-report"

REPLICATED = "results-replicated"
FUNCTIONAL = "artifacts-functional"
DIVERGENT = "results-divergent"

DEFAULT_RELATIVE_TOLERANCE = 0.10
DEFAULT_STATISTIC = "mean"


# -- records -----------------------------------------------------------------

@dataclass
class ExperimentRecord:
    uid: str
    meta: dict[str, Any]

    @classmethod
    def from_entry(cls, entry: ComponentEntry) -> "ExperimentRecord":
        return cls(entry.uid, entry.meta)

    @property
    def status(self) -> str:
        return self.meta.get("status", "failed")

    @property
    def ok(self) -> bool:
        return self.status == "success"

    @property
    def aggregated(self) -> dict[str, dict[str, float]]:
        return self.meta.get("aggregated", {})

    @property
    def functional(self) -> dict[str, Any]:
        return self.meta.get("functional", {})

    @property
    def choices(self) -> dict[str, Any]:
        return self.meta.get("effective_choices", {})

    def to_json(self) -> dict[str, Any]:
        return {"uid": self.uid, **self.meta}


def deps_json(state: PipelineState) -> dict[str, dict[str, str]]:
    return {role: {"soft_name": env.soft_name, "version": str(env.version),
                   "install_path": env.install_path}
            for role, env in state.resolved_deps.items()}


def seal(doc: dict[str, Any]) -> dict[str, Any]:
    body = {k: v for k, v in doc.items() if k != "content_hash"}
    return {**body, "content_hash": content_hash(body)}


def record(state: PipelineState, defn: PipelineDefinition, store: Store,
           context: Mapping[str, Any] | None = None, repo: str | None = None,
           uid: str | None = None) -> ExperimentRecord:
    """Persist ``state`` (successful or not) as an immutable experiment entry."""
    ctx = dict(context or {})
    ok = state.status == "success"
    seed = state.effective_choices.get("seed")
    doc: dict[str, Any] = {
        "type": RECORD,
        "pipeline_ref": defn.ref,
        "program_ref": state.program_ref or defn.program_ref,
        "pipeline": defn.to_json(),
        "functional_keys": list(defn.run_spec.functional_keys),
        "performance_keys": list(defn.run_spec.all_performance_keys),
        "resolved_deps": deps_json(state),
        "effective_choices": state.effective_choices,
        "platform_fingerprint": platform_fingerprint(),
        "per_repetition": state.per_repetition,
        "aggregated": state.aggregated if ok else {},
        "functional": state.functional if ok else {},
        "commands": state.commands,
        "status": "success" if ok else "failed",
        "error": state.error,
        "timestamps": {"started": state.started, "finished": state.finished,
                       "recorded": time.time()},
        "seed": seed if isinstance(seed, int) and not isinstance(seed, bool) else None,
        "exploration_id": ctx.pop("exploration_id", None),
    }
    doc.update(ctx)
    tags = {RECORD, doc["status"]}
    if doc["exploration_id"]:
        tags.add(f"exploration-{doc['exploration_id']}")
    entry = store.add_entry(repo, "experiment", tags=tags, meta=seal(doc), uid=uid)
    return ExperimentRecord.from_entry(entry)


def load_record(store: Store, ref: str, doc_type: str = RECORD) -> ExperimentRecord:
    entry = store.load(ref if ":" in ref else f"experiment:{ref}")
    if entry.meta.get("type") != doc_type:
        raise NotFound(f"{entry.uid_ref} is not a {doc_type}", ref=ref)
    return ExperimentRecord.from_entry(entry)


def verify_integrity(store: Store, ref: str) -> bool:
    """True iff the persisted meta bytes still hash to the stored content_hash."""
    entry = store.load(ref if ":" in ref else f"experiment:{ref}")
    try:
        doc = json.loads(store.read_meta_bytes(entry))
    except ValueError:
        return False
    if not isinstance(doc, dict) or "content_hash" not in doc:
        return False
    stored = doc.pop("content_hash")
    return stored == content_hash(doc)


# -- replay ------------------------------------------------------------------

def provenance_diff(reference: Mapping[str, Any], replay: Mapping[str, Any]) -> dict[str, Any]:
    """Dependency and platform differences between two records' meta documents."""
    deps = []
    ref_deps = reference.get("resolved_deps", {})
    new_deps = replay.get("resolved_deps", {})
    for role in sorted(set(ref_deps) | set(new_deps)):
        a, b = ref_deps.get(role), new_deps.get(role)
        if a is None or b is None:
            deps.append({"role": role, "field": "presence",
                         "reference": a and a["version"], "replay": b and b["version"],
                         "soft_name": (a or b)["soft_name"]})
            continue
        for key in ("version", "install_path"):
            if a[key] != b[key]:
                deps.append({"role": role, "soft_name": b["soft_name"], "field": key,
                             "reference": a[key], "replay": b[key]})
    plat = []
    pa = reference.get("platform_fingerprint", {})
    pb = replay.get("platform_fingerprint", {})
    for key in sorted(set(pa) | set(pb)):
        if pa.get(key) != pb.get(key):
            plat.append({"field": key, "reference": pa.get(key), "replay": pb.get(key)})
    return {"dependencies": deps, "platform": plat}


def replay(store: Store, ref: str, repo: str | None = None) -> tuple[ExperimentRecord, dict[str, Any]]:
    """Re-execute a recorded experiment with its recorded choices and fresh resolution."""
    reference = load_record(store, ref)
    meta = reference.meta
    for key in ("pipeline_ref", "program_ref"):
        target = meta.get(key)
        if not target or not store.exists(target):
            raise MissingComponent(f"{key.split('_')[0]} {target} referenced by "
                                   f"experiment {reference.uid} no longer exists",
                                   component=target, experiment=reference.uid)
    defn = PipelineDefinition.from_json(store.load(meta["pipeline_ref"]).meta,
                                        ref=meta["pipeline_ref"])
    defn.program_ref = meta["program_ref"]
    try:
        state = execute(defn, store, meta.get("effective_choices", {}), refresh=True)
    except CkpError as exc:
        state = getattr(exc, "state", None) or PipelineState(defn.ref, defn.program_ref)
        state.status, state.error = "failed", exc.to_json()
        log.warning("replay of %s failed: %s", reference.uid, exc)
    diff = provenance_diff(meta, {"resolved_deps": deps_json(state),
                                  "platform_fingerprint": platform_fingerprint()})
    new = record(state, defn, store, {"replay_of": reference.uid, "provenance_diff": diff}, repo)
    return new, diff


# -- tolerances and comparison -------------------------------------------------

@dataclass(frozen=True)
class ToleranceRule:
    kind: str = "relative"  # relative | absolute | exact
    value: float = DEFAULT_RELATIVE_TOLERANCE
    statistic: str = DEFAULT_STATISTIC

    def __post_init__(self) -> None:
        if self.kind not in ("relative", "absolute", "exact"):
            raise ValueError(f"unknown tolerance kind {self.kind!r}")
        if self.kind != "exact" and not (self.value >= 0 and math.isfinite(self.value)):
            raise ValueError("tolerance must be a finite value >= 0")

    @classmethod
    def from_json(cls, doc: Mapping[str, Any] | None) -> "ToleranceRule":
        doc = dict(doc or {})
        stat = doc.pop("statistic", DEFAULT_STATISTIC)
        kinds = [k for k in ("relative", "absolute", "exact") if k in doc]
        if len(kinds) != 1:
            raise ValueError(f"tolerance rule needs exactly one of relative/absolute/exact: {doc}")
        kind = kinds[0]
        value = 0.0 if kind == "exact" else float(doc[kind])
        return cls(kind, value, stat)

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"statistic": self.statistic}
        out[self.kind] = True if self.kind == "exact" else self.value
        return out

    def describe(self) -> str:
        if self.kind == "exact":
            return f"exact({self.statistic})"
        return f"{self.kind}<={self.value:g}({self.statistic})"


@dataclass
class ToleranceSpec:
    metrics: dict[str, ToleranceRule] = field(default_factory=dict)
    default: ToleranceRule = ToleranceRule()

    @classmethod
    def from_json(cls, doc: Mapping[str, Any] | None) -> "ToleranceSpec":
        doc = doc or {}
        return cls({k: ToleranceRule.from_json(v) for k, v in doc.get("metrics", {}).items()},
                   ToleranceRule.from_json(doc["default"]) if "default" in doc else ToleranceRule())

    def to_json(self) -> dict[str, Any]:
        return {"metrics": {k: v.to_json() for k, v in sorted(self.metrics.items())},
                "default": self.default.to_json()}

    def rule_for(self, metric: str) -> ToleranceRule:
        return self.metrics.get(metric, self.default)


def relative_difference(reference: float, replay: float) -> float:
    """Signed difference scaled by the larger magnitude; antisymmetric under swapping."""
    scale = max(abs(reference), abs(replay))
    return 0.0 if scale == 0 else (replay - reference) / scale


def evaluate_rule(rule: ToleranceRule, reference: float | None, replay: float | None) -> bool:
    if reference is None or replay is None:
        return False
    if rule.kind == "exact":
        return reference == replay
    if rule.kind == "absolute":
        return abs(replay - reference) <= rule.value
    return abs(relative_difference(reference, replay)) <= rule.value


def assign_badge(rows: Iterable[Mapping[str, Any]], replay_ok: bool) -> str:
    rows = list(rows)
    if not replay_ok or any(r["functional"] and not r["passed"] for r in rows):
        return DIVERGENT
    if all(r["passed"] for r in rows):
        return REPLICATED
    return FUNCTIONAL


@dataclass
class ValidationReport:
    reference_id: str
    replay_id: str
    rows: list[dict[str, Any]]
    environment_diff: dict[str, Any]
    badge: str
    tolerances: dict[str, Any]
    uid: str | None = None

    def to_json(self) -> dict[str, Any]:
        return {"type": REPORT, "reference": self.reference_id, "replay": self.replay_id,
                "rows": self.rows, "environment_diff": self.environment_diff,
                "badge": self.badge, "tolerances": self.tolerances,
                **({"uid": self.uid} if self.uid else {})}

    @classmethod
    def from_entry(cls, entry: ComponentEntry) -> "ValidationReport":
        m = entry.meta
        return cls(m["reference"], m["replay"], m["rows"], m["environment_diff"], m["badge"],
                   m.get("tolerances", {}), entry.uid)


def _functional_equal(a: Any, b: Any) -> bool:
    return json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def build_report(reference: ExperimentRecord, replayed: ExperimentRecord,
                 tolerances: ToleranceSpec | None = None) -> ValidationReport:
    tolerances = tolerances or ToleranceSpec()
    ref, new = reference.meta, replayed.meta
    if not reference.ok:
        raise IncomparableExperiments(f"reference {reference.uid} did not succeed")
    functional_keys = list(ref.get("functional_keys", sorted(reference.functional)))
    perf_keys = sorted(reference.aggregated)
    if replayed.ok:
        overlap = (set(functional_keys) & set(replayed.functional)) | \
                  (set(perf_keys) & set(replayed.aggregated))
        if not overlap:
            raise IncomparableExperiments(
                f"experiments {reference.uid} and {replayed.uid} share no metrics")
    rows = []
    for key in functional_keys:
        a = reference.functional.get(key)
        b = replayed.functional.get(key) if replayed.ok else None
        passed = replayed.ok and key in replayed.functional and _functional_equal(a, b)
        rows.append({"metric": key, "functional": True, "rule": "exact(functional)",
                     "reference": a, "replay": b, "passed": passed, "relative_difference": None})
    for key in perf_keys:
        rule = tolerances.rule_for(key)
        a = reference.aggregated[key].get(rule.statistic)
        b = replayed.aggregated.get(key, {}).get(rule.statistic) if replayed.ok else None
        passed = evaluate_rule(rule, a, b)
        rel = relative_difference(a, b) if a is not None and b is not None else None
        rows.append({"metric": key, "functional": False, "rule": rule.describe(),
                     "reference": a, "replay": b, "passed": passed, "relative_difference": rel})
    diff = new.get("provenance_diff") or provenance_diff(ref, new)
    return ValidationReport(reference.uid, replayed.uid, rows, diff,
                            assign_badge(rows, replayed.ok), tolerances.to_json())


def compare(store: Store, reference_ref: str, replay_ref: str,
            tolerances: ToleranceSpec | None = None, persist: bool = True,
            repo: str | None = None) -> ValidationReport:
    report = build_report(load_record(store, reference_ref), load_record(store, replay_ref),
                          tolerances)
    if persist:
        doc = seal({k: v for k, v in report.to_json().items() if k != "uid"})
        entry = store.add_entry(repo, "experiment", tags={"report", report.badge}, meta=doc)
        report.uid = entry.uid
    return report


def load_report(store: Store, ref: str) -> ValidationReport:
    entry = store.load(ref if ":" in ref else f"experiment:{ref}")
    if entry.meta.get("type") != REPORT:
        raise NotFound(f"{entry.uid_ref} is not a validation report", ref=ref)
    return ValidationReport.from_entry(entry)


# -- archival ----------------------------------------------------------------

DOI_RE = re.compile(r"^(?:doi:|https?://(?:dx\.)?doi\.org/)?10\.\d{4,9}/\S+$", re.IGNORECASE)
SWHID_RE = re.compile(r"^swh:1:(?:cnt|dir|rev|rel|snp):[0-9a-f]{40}$")
URL_RE = re.compile(r"^https?://[A-Za-z0-9.-]+\.[A-Za-z]{2,}(?::\d+)?(?:/\S*)?$")


def valid_archive_id(value: Any) -> bool:
    if not isinstance(value, str):
        return False
    return bool(DOI_RE.match(value) or SWHID_RE.match(value) or URL_RE.match(value))


def component_hashes(store: Store, refs: Iterable[str]) -> dict[str, str]:
    """ref -> sha256 of the component's canonical meta bytes."""
    import hashlib

    out = {}
    for ref in refs:
        entry = store.load(ref)
        out[ref] = hashlib.sha256(store.read_meta_bytes(entry)).hexdigest()
    return out


def build_manifest(store: Store, refs: Iterable[str], archive_id: str | None) -> dict[str, Any]:
    refs = list(refs)
    manifest: dict[str, Any] = {"components": refs,
                                "content_hash": content_hash(component_hashes(store, refs))}
    if archive_id is not None:
        manifest["archive_id"] = archive_id
    return manifest


def check_archival(store: Store, manifest: Mapping[str, Any]) -> dict[str, Any]:
    """Offline archival checks: component existence, content hash, archive identifier."""
    checks = []
    refs = list(manifest.get("components", []))
    missing = []
    for ref in refs:
        ok = isinstance(ref, str) and store.exists(ref)
        if not ok:
            missing.append(ref)
        checks.append({"check": "component_exists", "target": ref, "passed": ok})
    if missing:
        checks.append({"check": "content_hash", "passed": False,
                       "message": "cannot hash missing components"})
    else:
        expected = manifest.get("content_hash")
        actual = content_hash(component_hashes(store, refs))
        checks.append({"check": "content_hash", "passed": expected == actual,
                       "message": "" if expected == actual else f"expected {expected}, got {actual}"})
    archive = manifest.get("archive_id")
    if archive is None:
        checks.append({"check": "archive_id", "passed": False, "message": "no archive identifier"})
    else:
        ok = valid_archive_id(archive)
        checks.append({"check": "archive_id", "target": archive, "passed": ok,
                       "message": "" if ok else "not a DOI, SWHID or http(s) URL"})
    return {"passed": all(c["passed"] for c in checks), "checks": checks}
