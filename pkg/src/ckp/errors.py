"""Exception hierarchy shared by every ckp module.

Each error carries a stable ``code`` string; the CLI surfaces it in the
``{"error": {"code", "message"}}`` object of JSON mode.
"""
from __future__ import annotations

from typing import Any


class CkpError(Exception):
    code = "error"

    def __init__(self, message: str = "", **details: Any) -> None:
        super().__init__(message)
        self.message = message
        self.details = details

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"code": self.code, "message": self.message}
        if self.details:
            out["details"] = _jsonable(self.details)
        return out


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, set, frozenset)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    if hasattr(value, "to_json"):
        return value.to_json()
    return str(value)


# component store

class StoreError(CkpError):
    code = "store_error"


class AliasConflict(StoreError):
    code = "alias_conflict"


class InvalidKind(StoreError):
    code = "invalid_kind"


class InvalidQuery(StoreError):
    code = "invalid_query"


class StoreIoError(StoreError):
    code = "store_io"


class InvalidAlias(StoreError):
    code = "invalid_alias"


class StoreBusy(StoreError):
    code = "store_busy"


class NotFound(StoreError):
    code = "not_found"


class ImmutableRecord(StoreError):
    code = "immutable_record"


# env detection

class InvalidVersion(CkpError):
    code = "invalid_version"


class InvalidDescriptor(CkpError):
    code = "invalid_descriptor"


class UnresolvedDependency(CkpError):
    code = "unresolved_dependency"


class EnvConflict(CkpError):
    code = "env_conflict"


# packages

class InvalidRecipe(CkpError):
    code = "invalid_recipe"


class ChecksumMismatch(CkpError):
    code = "checksum_mismatch"


class FetchError(CkpError):
    code = "fetch_error"


class UnpackError(CkpError):
    code = "unpack_error"


class InstallStepFailed(CkpError):
    code = "install_step_failed"

    def __init__(self, step: int, output: str, message: str = "") -> None:
        super().__init__(message or f"install step {step} failed", step=step, output=output)
        self.step = step
        self.output = output


# pipeline

class PipelineError(CkpError):
    """Stage failure; ``state`` holds whatever the pipeline produced before failing."""

    code = "pipeline_error"
    state: Any = None


class InvalidPipeline(PipelineError):
    code = "invalid_pipeline"


class CompileFailed(PipelineError):
    code = "compile_failed"


class ArtifactMissing(PipelineError):
    code = "artifact_missing"


class RunFailed(PipelineError):
    code = "run_failed"

    def __init__(self, repetition: int, message: str = "", **details: Any) -> None:
        super().__init__(message or f"run failed at repetition {repetition}",
                         repetition=repetition, **details)
        self.repetition = repetition


class MetricsParseError(PipelineError):
    code = "metrics_parse_error"

    def __init__(self, repetition: int, message: str = "", **details: Any) -> None:
        super().__init__(message or f"unparsable metrics at repetition {repetition}",
                         repetition=repetition, **details)
        self.repetition = repetition


class NonDeterministicFunctionalOutput(PipelineError):
    code = "nondeterministic_functional_output"

    def __init__(self, key: str, values: list[Any]) -> None:
        super().__init__(f"functional metric {key!r} varies across repetitions: {values!r}",
                         key=key, values=values)
        self.key = key
        self.values = values


# autotuner

class InvalidSpace(CkpError):
    code = "invalid_space"


class IncomparablePoint(CkpError):
    code = "incomparable_point"

    def __init__(self, index: int, metric: str) -> None:
        super().__init__(f"point {index} does not define objective {metric!r}",
                         index=index, metric=metric)
        self.index = index
        self.metric = metric


# experiments

class MissingComponent(CkpError):
    code = "missing_component"


class IncomparableExperiments(CkpError):
    code = "incomparable_experiments"


class IntegrityError(CkpError):
    code = "integrity_error"


# reporting

class InvalidColumn(CkpError):
    code = "invalid_column"


class InvalidAxis(CkpError):
    code = "invalid_axis"
