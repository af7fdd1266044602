import os

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ckp.errors import (
    ArtifactMissing,
    CompileFailed,
    InvalidPipeline,
    MetricsParseError,
    NonDeterministicFunctionalOutput,
    RunFailed,
    UnresolvedDependency,
)
from ckp.pipeline import PipelineDefinition, execute, load_pipeline, parse_metrics, summarize
from conftest import requires_cc
from helpers import runner_pipeline, scripted_store
from oracles import population_stats


@pytest.fixture
def sstore(tmp_path, tool_factory):
    return scripted_store(tmp_path / "repo", tmp_path / "tools", tool_factory)


def test_summarize_example():
    assert summarize([2, 4]) == {"min": 2.0, "max": 4.0, "mean": 3.0, "median": 2.0,
                                 "std": 1.0, "count": 2}


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=30))
@settings(max_examples=300, deadline=None)
def test_summarize_matches_textbook(values):
    got, ref = summarize(values), population_stats(values)
    assert got["count"] == ref["count"]
    assert got["min"] == ref["min"] and got["max"] == ref["max"] and got["median"] == ref["median"]
    assert got["mean"] == pytest.approx(ref["mean"], rel=1e-9, abs=1e-6)
    assert got["std"] == pytest.approx(ref["std"], rel=1e-6, abs=1e-6)
    assert got["min"] <= got["mean"] <= got["max"]
    assert got["min"] <= got["median"] <= got["max"]


def test_parse_metrics():
    assert parse_metrics('{"a": 1, "b": "x", "c": 2.5}', 0) == {"a": 1, "b": "x", "c": 2.5}
    for bad in ["nope", "[1]", '{"a": [1]}', '{"a": true}', '{"a": {"b": 1}}']:
        with pytest.raises(MetricsParseError):
            parse_metrics(bad, 0)


def test_execute_success(sstore):
    defn = load_pipeline(sstore, "pipeline:script")
    state = execute(defn, sstore)
    assert state.ok and state.stages == ["resolve", "run", "aggregate"]
    assert len(state.per_repetition) == 3
    assert state.functional == {"checksum": "abc123"}
    assert set(state.aggregated) == {"ops", "wall_time_s"}
    assert state.aggregated["ops"]["mean"] == 5.0 and state.aggregated["ops"]["count"] == 3
    wt = state.aggregated["wall_time_s"]
    assert wt["min"] <= wt["mean"] <= wt["max"] and wt["min"] > 0
    assert str(state.resolved_deps["runner"].version) == "1.5"
    assert not os.path.exists(state.scratch)


def test_execute_metrics_from_file(tmp_path, tool_factory):
    store = scripted_store(tmp_path / "repo", tmp_path / "tools", tool_factory,
                           pipeline=runner_pipeline(metrics_source="metrics.json"))
    state = execute(load_pipeline(store, "script"), store, {"mode": "file"})
    assert state.functional == {"checksum": "f"}


def test_unparsable_metrics_is_rep_zero(sstore):
    with pytest.raises(MetricsParseError) as info:
        execute(load_pipeline(sstore, "script"), sstore, {"mode": "garbage"})
    assert info.value.repetition == 0
    assert info.value.state.status == "failed"


def test_missing_declared_key(sstore):
    with pytest.raises(MetricsParseError):
        execute(load_pipeline(sstore, "script"), sstore, {"mode": "missing"})


def test_nonzero_exit(sstore):
    with pytest.raises(RunFailed) as info:
        execute(load_pipeline(sstore, "script"), sstore, {"mode": "fail"})
    assert info.value.repetition == 0
    assert "boom" in info.value.details["output"]


def test_nondeterministic_functional(sstore):
    with pytest.raises(NonDeterministicFunctionalOutput) as info:
        execute(load_pipeline(sstore, "script"), sstore, {"mode": "counter"})
    assert info.value.details["values"] == ["c1", "c2", "c3"]


def test_varying_performance_is_fine(sstore):
    state = execute(load_pipeline(sstore, "script"), sstore, {"mode": "perf"})
    assert state.aggregated["ops"]["median"] == 4.0
    assert state.aggregated["ops"]["std"] == pytest.approx(1.632993161855452)


def test_unknown_choice_and_coercion(sstore):
    defn = load_pipeline(sstore, "script")
    with pytest.raises(InvalidPipeline):
        defn.merge_choices({"nope": 1})
    assert defn.merge_choices({"level": "7"})["level"] == 7
    with pytest.raises(InvalidPipeline):
        defn.merge_choices({"level": "seven"})


def test_unresolved_dependency_names_role(tmp_path, tool_factory):
    store = scripted_store(tmp_path / "repo", tmp_path / "tools", tool_factory, version="0.5")
    with pytest.raises(UnresolvedDependency) as info:
        execute(load_pipeline(store, "script"), store)
    assert info.value.details["role"] == "runner"


def test_program_dir_untouched(sstore):
    prog = sstore.load("program:script")
    before = sorted(os.listdir(prog.data_path))
    with pytest.raises(NonDeterministicFunctionalOutput):
        execute(load_pipeline(sstore, "script"), sstore, {"mode": "counter"})
    assert sorted(os.listdir(prog.data_path)) == before


@pytest.mark.parametrize("mutate", [
    lambda d: d["run"].update(repetitions=0),
    lambda d: d["run"].update(functional_keys=["ops"]),
    lambda d: d["run"].update(command="${dep:runner} ${choice:undeclared}"),
])
def test_invalid_definitions(mutate):
    doc = runner_pipeline()
    mutate(doc)
    with pytest.raises(InvalidPipeline):
        PipelineDefinition.from_json(doc)


def test_definition_round_trip():
    d = PipelineDefinition.from_json(runner_pipeline())
    assert PipelineDefinition.from_json(d.to_json()).to_json() == d.to_json()


@requires_cc
def test_compile_failures(fixture_store):
    defn = load_pipeline(fixture_store, "pipeline:hello-bench")
    with pytest.raises(CompileFailed):
        execute(defn, fixture_store, {"opt": "-Wunknown-bogus-flag -x nosuchlang"})
    doc = defn.to_json()
    doc["compile"]["artifact"] = "not-built"
    doc["run"]["command"] = "${artifact:not-built}"
    with pytest.raises(ArtifactMissing):
        execute(PipelineDefinition.from_json(doc), fixture_store)


@requires_cc
def test_fixture_end_to_end(fixture_store):
    state = execute(load_pipeline(fixture_store, "pipeline:hello-bench"), fixture_store,
                    {"iterations": 2000000})
    assert state.ok and state.stages == ["resolve", "compile", "run", "aggregate"]
    assert len(state.per_repetition) == 3
    assert len(state.functional["checksum"]) == 16
    assert state.aggregated["ops"]["mean"] == 2000000
