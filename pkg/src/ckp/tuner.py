"""Tuning-space enumeration, exploration and Pareto filtering."""
from __future__ import annotations

import itertools
import logging
import math
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from ckp.errors import CkpError, IncomparablePoint, InvalidSpace
from ckp.experiments import EXPLORATION, ExperimentRecord, record, seal
from ckp.pipeline import STAT_NAMES, PipelineDefinition, PipelineState, execute
from ckp.store import Store, new_uid

log = logging.getLogger(__name__)

SHUFFLE_LIMIT = 10**6


@dataclass(frozen=True)
class TuningDimension:
    choice_key: str
    values: tuple[Any, ...]

    def __post_init__(self) -> None:
        if not self.values:
            raise InvalidSpace(f"dimension {self.choice_key!r} has no values")
        seen = []
        for v in self.values:
            if v in seen:
                raise InvalidSpace(f"dimension {self.choice_key!r} repeats value {v!r}")
            seen.append(v)


@dataclass(frozen=True)
class TuningSpace:
    dimensions: tuple[TuningDimension, ...]
    strategy: str = "exhaustive"
    sample_count: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.dimensions:
            raise InvalidSpace("tuning space has no dimensions")
        keys = [d.choice_key for d in self.dimensions]
        if len(set(keys)) != len(keys):
            raise InvalidSpace("duplicate tuning dimension")
        if self.strategy not in ("exhaustive", "random"):
            raise InvalidSpace(f"unknown strategy {self.strategy!r}")
        if self.strategy == "random" and (self.sample_count is None or self.sample_count < 1):
            raise InvalidSpace("random strategy needs sample_count >= 1")

    @property
    def size(self) -> int:
        return math.prod(len(d.values) for d in self.dimensions)

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "TuningSpace":
        try:
            dims = tuple(TuningDimension(d["key"], tuple(d["values"])) for d in doc["dimensions"])
            strat = doc.get("strategy") or {}
            if isinstance(strat, str):
                strat = {"name": strat}
            return cls(dims, strat.get("name", "exhaustive"), strat.get("sample_count"),
                       int(strat.get("seed", 0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidSpace(f"malformed tuning space: {exc!r}") from exc

    def to_json(self) -> dict[str, Any]:
        strat: dict[str, Any] = {"name": self.strategy}
        if self.strategy == "random":
            strat.update(sample_count=self.sample_count, seed=self.seed)
        return {"dimensions": [{"key": d.choice_key, "values": list(d.values)}
                               for d in self.dimensions],
                "strategy": strat}

    def with_strategy(self, strategy: str | None = None, seed: int | None = None,
                      sample_count: int | None = None) -> "TuningSpace":
        return TuningSpace(self.dimensions, strategy or self.strategy,
                           sample_count if sample_count is not None else self.sample_count,
                           seed if seed is not None else self.seed)


@dataclass(frozen=True)
class Objective:
    metric: str
    direction: str = "minimize"
    statistic: str = "mean"

    def __post_init__(self) -> None:
        if self.direction not in ("minimize", "maximize"):
            raise InvalidSpace(f"objective direction must be minimize or maximize, "
                               f"got {self.direction!r}")
        if self.statistic not in STAT_NAMES:
            raise InvalidSpace(f"unknown statistic {self.statistic!r}")


@dataclass(frozen=True)
class ParetoObjectives:
    objectives: tuple[Objective, ...]

    def __post_init__(self) -> None:
        if not self.objectives:
            raise InvalidSpace("at least one objective is required")

    @classmethod
    def from_json(cls, doc: Sequence[Mapping[str, Any]]) -> "ParetoObjectives":
        return cls(tuple(Objective(o["metric"], o.get("direction", "minimize"),
                                   o.get("statistic", "mean")) for o in doc))

    @classmethod
    def of(cls, *specs: tuple[str, str]) -> "ParetoObjectives":
        return cls(tuple(Objective(m, d) for m, d in specs))

    def to_json(self) -> list[dict[str, str]]:
        return [{"metric": o.metric, "direction": o.direction, "statistic": o.statistic}
                for o in self.objectives]


# -- enumeration ---------------------------------------------------------------

def _point_at(space: TuningSpace, index: int) -> dict[str, Any]:
    """Decode a flat index in the lexicographic product (last dimension fastest)."""
    point = {}
    for dim in reversed(space.dimensions):
        index, r = divmod(index, len(dim.values))
        point[dim.choice_key] = dim.values[r]
    return {d.choice_key: point[d.choice_key] for d in space.dimensions}


def enumerate_points(space: TuningSpace) -> list[dict[str, Any]]:
    keys = [d.choice_key for d in space.dimensions]
    if space.strategy == "exhaustive":
        return [dict(zip(keys, combo))
                for combo in itertools.product(*(d.values for d in space.dimensions))]
    total = space.size
    n = space.sample_count or 0
    if n > total:
        raise InvalidSpace(f"sample_count {n} exceeds space size {total}")
    rng = random.Random(space.seed)
    if total <= SHUFFLE_LIMIT:
        order = list(range(total))
        rng.shuffle(order)
        picks = order[:n]
    else:
        chosen: set[int] = set()
        picks = []
        while len(picks) < n:
            i = rng.randrange(total)
            if i not in chosen:
                chosen.add(i)
                picks.append(i)
    return [_point_at(space, i) for i in picks]


# -- Pareto ------------------------------------------------------------------

def _objective_matrix(points: Sequence[Mapping[str, Any]],
                      objectives: ParetoObjectives) -> np.ndarray:
    """Rows = points, columns = objectives, negated where larger is better."""
    y = np.empty((len(points), len(objectives.objectives)), dtype=float)
    for i, p in enumerate(points):
        for j, obj in enumerate(objectives.objectives):
            v = p.get(obj.metric)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or math.isnan(v):
                raise IncomparablePoint(i, obj.metric)
            y[i, j] = -v if obj.direction == "maximize" else v
    return y


def pareto_indices(points: Sequence[Mapping[str, Any]], objectives: ParetoObjectives,
                   block: int = 512) -> list[int]:
    """Indices of the non-dominated points, in input order."""
    y = _objective_matrix(points, objectives)
    n = len(y)
    keep = np.ones(n, dtype=bool)
    for start in range(0, n, block):
        cand = y[start:start + block]                       # (b, k)
        le = (y[None, :, :] <= cand[:, None, :]).all(-1)    # (b, n): y[j] no worse than cand[i]
        lt = (y[None, :, :] < cand[:, None, :]).any(-1)     # y[j] strictly better somewhere
        keep[start:start + block] = ~(le & lt).any(axis=1)
    return [int(i) for i in np.flatnonzero(keep)]


def pareto_filter(points: Sequence[Mapping[str, Any]],
                  objectives: ParetoObjectives) -> list[Mapping[str, Any]]:
    return [points[i] for i in pareto_indices(points, objectives)]


# -- exploration ---------------------------------------------------------------

@dataclass
class ExplorationResult:
    exploration_id: str
    points: list[dict[str, Any]]
    records: list[ExperimentRecord]
    frontier: list[str] = field(default_factory=list)

    @property
    def failed(self) -> list[str]:
        return [r.uid for r in self.records if not r.ok]

    def to_json(self) -> dict[str, Any]:
        return {"exploration_id": self.exploration_id,
                "points": self.points,
                "records": [r.uid for r in self.records],
                "failed": self.failed,
                "frontier": self.frontier}


def objective_values(rec: ExperimentRecord, objectives: ParetoObjectives) -> dict[str, Any]:
    out = {}
    for obj in objectives.objectives:
        stats = rec.aggregated.get(obj.metric)
        if stats is not None and obj.statistic in stats:
            out[obj.metric] = stats[obj.statistic]
    return out


def _run_point(defn: PipelineDefinition, store: Store, point: Mapping[str, Any]) -> PipelineState:
    try:
        return execute(defn, store, point)
    except CkpError as exc:
        state = getattr(exc, "state", None) or PipelineState(defn.ref, defn.program_ref)
        state.status, state.error = "failed", exc.to_json()
        log.warning("point %s failed: %s", dict(point), exc)
        return state


def explore(defn: PipelineDefinition, store: Store, space: TuningSpace | None = None,
            objectives: ParetoObjectives | None = None, repo: str | None = None,
            parallel: bool = False, progress: Callable[[str], None] | None = None
            ) -> ExplorationResult:
    """Execute the pipeline at every point, record each, and compute the frontier.

    Failing points are recorded with status ``failed`` and skipped by the
    frontier. ``parallel`` is honoured only for pipelines declared
    ``timing_insensitive``.
    """
    tuning = defn.tuning or {}
    if space is None:
        space = TuningSpace.from_json(tuning)
    if objectives is None:
        if "objectives" not in tuning:
            raise InvalidSpace("pipeline declares no tuning objectives")
        objectives = ParetoObjectives.from_json(tuning["objectives"])
    unknown = [d.choice_key for d in space.dimensions if d.choice_key not in defn.choices]
    if unknown:
        raise InvalidSpace(f"tuning keys not declared as pipeline choices: {unknown}")
    perf = defn.run_spec.all_performance_keys
    stray = [o.metric for o in objectives.objectives if o.metric not in perf]
    if stray:
        raise InvalidSpace(f"objectives are not performance keys of the pipeline: {stray}")

    points = enumerate_points(space)
    exploration_id = new_uid()
    records: list[ExperimentRecord] = []
    say = progress or (lambda msg: None)

    def persist(i: int, state: PipelineState) -> None:
        rec = record(state, defn, store, {"exploration_id": exploration_id, "point_index": i}, repo)
        records.append(rec)
        say(f"[{i + 1}/{len(points)}] {points[i]} -> {rec.status} ({rec.uid})")

    if parallel and defn.timing_insensitive:
        with ThreadPoolExecutor() as pool:
            states = list(pool.map(lambda p: _run_point(defn, store, p), points))
        for i, state in enumerate(states):
            persist(i, state)
    else:
        for i, point in enumerate(points):
            persist(i, _run_point(defn, store, point))

    ok = [r for r in records if r.ok]
    frontier = [ok[i].uid for i in pareto_indices([objective_values(r, objectives) for r in ok],
                                                   objectives)] if ok else []
    result = ExplorationResult(exploration_id, points, records, frontier)
    store.add_entry(repo, "experiment", tags={EXPLORATION}, uid=exploration_id, meta=seal({
        "type": EXPLORATION,
        "pipeline_ref": defn.ref,
        "space": space.to_json(),
        "objectives": objectives.to_json(),
        **result.to_json(),
    }))
    return result
