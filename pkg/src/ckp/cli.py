"""``ckp <action> <module_kind>[:<entry>] [key=value]... [--flag]...``

Exit codes: 0 success, 1 operation error, 2 usage error. With ``--json``
stdout carries exactly one JSON object; diagnostics go to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

from ckp import __version__
from ckp.errors import CkpError
from ckp.store import KINDS, ComponentEntry, Store

log = logging.getLogger("ckp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")


# -- argument helpers ------------------------------------------------------------

def parse_target(target: str | None, allowed: Sequence[str] | None = None,
                 need_name: bool = False) -> tuple[str, str | None]:
    if not target:
        raise UsageError("missing target <module_kind>[:<entry>]")
    kind, sep, name = target.partition(":")
    if kind not in KINDS:
        raise UsageError(f"unknown module kind {kind!r}; expected one of {', '.join(KINDS)}")
    if allowed and kind not in allowed:
        raise UsageError(f"this action works on {' or '.join(allowed)}, not {kind}")
    if need_name and not name:
        raise UsageError(f"missing entry name in {target!r}")
    return kind, (name or None)


def parse_kv(pairs: Sequence[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise UsageError(f"expected key=value, got {pair!r}")
        out[key] = value
    return out


def _split_list(value: str | None) -> list[str]:
    return [v for v in (value or "").split(",") if v]


def _load_json_arg(value: str) -> Any:
    if value.startswith("@"):
        value = Path(value[1:]).read_text(encoding="utf-8")
    try:
        return json.loads(value)
    except ValueError as exc:
        raise UsageError(f"invalid JSON: {exc}") from None


def _entry_json(e: ComponentEntry, with_meta: bool = False) -> dict[str, Any]:
    return e.to_json(with_meta=with_meta)


# -- verbs -----------------------------------------------------------------

def cmd_add(store: Store, a: argparse.Namespace, kv: dict[str, str]) -> dict[str, Any]:
    kind, alias = parse_target(a.target)
    tags = _split_list(kv.pop("tags", None))
    meta = _load_json_arg(a.meta) if a.meta else {}
    if not isinstance(meta, dict):
        raise UsageError("--meta must be a JSON object")
    meta.update(kv)
    entry = store.add_entry(a.repo, kind, alias=alias, tags=tags, meta=meta)
    if a.payload:
        src = Path(a.payload)
        for child in sorted(src.iterdir()) if src.is_dir() else [src]:
            dst = entry.data_path / child.name
            if child.is_dir():
                shutil.copytree(child, dst)
            else:
                shutil.copy2(child, dst)
    return {"entry": _entry_json(entry, True)}


def cmd_find(store: Store, a: argparse.Namespace, kv: dict[str, str]) -> dict[str, Any]:
    kind, pattern = parse_target(a.target)
    matches = store.find_entries(kind, pattern or "*", _split_list(kv.get("tags")))
    return {"matches": [_entry_json(e) for e in matches]}


def cmd_rm(store: Store, a: argparse.Namespace, kv: dict[str, str]) -> dict[str, Any]:
    parse_target(a.target, need_name=True)
    return store.remove_entry(store.load(a.target))


def cmd_show(store: Store, a: argparse.Namespace, kv: dict[str, str]) -> dict[str, Any]:
    parse_target(a.target, need_name=True)
    return {"entry": _entry_json(store.load(a.target), True)}


def _constraint(kv: dict[str, str]):
    from ckp.versions import VersionConstraint

    return VersionConstraint.from_json({k: kv[k] for k in ("min", "max", "exact") if k in kv})


def cmd_detect(store: Store, a: argparse.Namespace, kv: dict[str, str]) -> dict[str, Any]:
    from ckp.detect import detect_and_cache, find_descriptor

    _, name = parse_target(a.target, ["soft"], need_name=True)
    _, soft = find_descriptor(store, name)
    roots = [r for r in kv.get("roots", "").split(os.pathsep) if r]
    envs = detect_and_cache(store, soft, roots, use_system_path=not a.no_system_path, repo=a.repo)
    return {"soft_name": soft.soft_name, "detected": [e.to_json() for e in envs]}


def cmd_resolve(store: Store, a: argparse.Namespace, kv: dict[str, str]) -> dict[str, Any]:
    from ckp.detect import find_descriptor, resolve_from_store

    _, name = parse_target(a.target, ["soft"], need_name=True)
    _, soft = find_descriptor(store, name)
    env = resolve_from_store(store, soft.soft_name, _constraint(kv), refresh=a.refresh, repo=a.repo)
    return {"resolved": env.to_json()}


def cmd_envscript(store: Store, a: argparse.Namespace, kv: dict[str, str]) -> dict[str, Any]:
    from ckp.detect import emit_env_script, find_descriptor, resolve_from_store
    from ckp.pipeline import load_pipeline, resolve

    kind, name = parse_target(a.target, ["soft", "pipeline"], need_name=True)
    if kind == "pipeline":
        envs = list(resolve(load_pipeline(store, a.target), store).resolved_deps.values())
    else:
        _, soft = find_descriptor(store, name)
        envs = [resolve_from_store(store, soft.soft_name, _constraint(kv), repo=a.repo)]
    return {"script": emit_env_script(envs)}


def cmd_install(store: Store, a: argparse.Namespace, kv: dict[str, str]) -> dict[str, Any]:
    from ckp.packages import install_package

    parse_target(a.target, ["package"], need_name=True)
    env = install_package(store, a.target, prefix=a.prefix, repo=a.repo)
    return {"installed": env.to_json()}


def cmd_run(store: Store, a: argparse.Namespace, kv: dict[str, str]) -> dict[str, Any]:
    from ckp.experiments import record
    from ckp.pipeline import PipelineState, execute, load_pipeline

    parse_target(a.target, ["pipeline"], need_name=True)
    defn = load_pipeline(store, a.target)
    try:
        state = execute(defn, store, kv, refresh=a.refresh, keep_scratch=a.keep_scratch)
    except CkpError as exc:
        state = getattr(exc, "state", None) or PipelineState(defn.ref, defn.program_ref)
        if "resolve" in state.stages or state.per_repetition:
            rec = record(state, defn, store, repo=a.repo)
            exc.details["experiment"] = rec.uid
        raise
    rec = record(state, defn, store, repo=a.repo)
    return {
        "experiment": rec.uid,
        "status": rec.status,
        "effective_choices": state.effective_choices,
        "resolved_deps": rec.meta["resolved_deps"],
        "functional": state.functional,
        "aggregated": state.aggregated,
        "repetitions": len(state.per_repetition),
    }


def cmd_explore(store: Store, a: argparse.Namespace, kv: dict[str, str]) -> dict[str, Any]:
    from ckp.pipeline import load_pipeline
    from ckp.tuner import TuningSpace, explore

    parse_target(a.target, ["pipeline"], need_name=True)
    defn = load_pipeline(store, a.target)
    if not defn.tuning.get("dimensions"):
        raise UsageError(f"{a.target} declares no tuning space")
    space = TuningSpace.from_json(defn.tuning).with_strategy(a.strategy, a.seed, a.sample_count)
    result = explore(defn, store, space, repo=a.repo, parallel=a.parallel,
                     progress=lambda msg: print(msg, file=sys.stderr, flush=True))
    return result.to_json()


def cmd_replay(store: Store, a: argparse.Namespace, kv: dict[str, str]) -> dict[str, Any]:
    from ckp.experiments import replay

    parse_target(a.target, ["experiment"], need_name=True)
    new, diff = replay(store, a.target, repo=a.repo)
    return {"experiment": new.uid, "replay_of": new.meta.get("replay_of"), "status": new.status,
            "functional": new.functional, "aggregated": new.aggregated, "diff": diff}


def cmd_compare(store: Store, a: argparse.Namespace, kv: dict[str, str]) -> dict[str, Any]:
    from ckp.experiments import ToleranceRule, ToleranceSpec, compare

    parse_target(a.target, ["experiment"], need_name=True)
    if "replay" not in kv:
        raise UsageError("compare needs replay=<experiment>")
    try:
        if a.tolerances:
            spec = ToleranceSpec.from_json(_load_json_arg(a.tolerances))
        else:
            spec = ToleranceSpec(default=ToleranceRule("relative", a.tolerance, a.statistic))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    report = compare(store, a.target, kv["replay"], spec, repo=a.repo)
    return {"report": report.uid, "badge": report.badge, "rows": report.rows,
            "environment_diff": report.environment_diff}


def cmd_check_archival(store: Store, a: argparse.Namespace, kv: dict[str, str]) -> dict[str, Any]:
    from ckp.experiments import build_manifest, check_archival

    if not a.target:
        raise UsageError("missing manifest path")
    path = Path(a.target)
    if a.create:
        manifest = build_manifest(store, _split_list(kv.get("components")), kv.get("archive"))
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise CkpError(f"cannot read manifest {path}: {exc}") from None
    return check_archival(store, manifest)


def cmd_table(store: Store, a: argparse.Namespace, kv: dict[str, str]) -> dict[str, Any]:
    from ckp.reporting import export_table, find_records

    _, pattern = parse_target(a.target, ["experiment"])
    records = find_records(store, pattern or "*", _split_list(kv.get("tags")),
                           kv.get("exploration"))
    text = export_table(records, _split_list(kv.get("columns")) or None)
    return _maybe_write(a, {"csv": text, "rows": len(records)}, text)


def cmd_plot_data(store: Store, a: argparse.Namespace, kv: dict[str, str]) -> dict[str, Any]:
    from ckp.reporting import export_plot_series

    _, name = parse_target(a.target, ["experiment"], need_name=True)
    if "x" not in kv:
        raise UsageError("plot-data needs x=<choice key>")
    series = [s.to_json() for s in export_plot_series(store, name, kv["x"],
                                                      kv.get("y", "wall_time_s:mean"))]
    return _maybe_write(a, {"series": series},
                        json.dumps({"series": series}, indent=2, sort_keys=True) + "\n")


def cmd_report(store: Store, a: argparse.Namespace, kv: dict[str, str]) -> dict[str, Any]:
    from ckp.reporting import render_validation_report

    _, name = parse_target(a.target, ["experiment"], need_name=True)
    text = render_validation_report(store, name)
    return _maybe_write(a, {"text": text}, text)


def _maybe_write(a: argparse.Namespace, result: dict[str, Any], text: str) -> dict[str, Any]:
    if a.output:
        Path(a.output).write_text(text, encoding="utf-8")
        result["output"] = a.output
    else:
        result["_text"] = text
    return result


VERBS: dict[str, tuple[Callable[..., dict[str, Any]], str]] = {
    "add": (cmd_add, "add an entry: add <kind>[:<alias>] tags=a,b [key=value]..."),
    "find": (cmd_find, "list entries: find <kind>[:<pattern>] [tags=a,b]"),
    "rm": (cmd_rm, "remove an entry: rm <kind>:<entry>"),
    "show": (cmd_show, "print one entry: show <kind>:<entry>"),
    "detect": (cmd_detect, "detect installations: detect soft:<descriptor> [roots=dir:dir]"),
    "resolve": (cmd_resolve, "pick an installation: resolve soft:<descriptor> [min=] [max=] [exact=]"),
    "envscript": (cmd_envscript, "emit export lines: envscript soft:<descriptor>|pipeline:<entry>"),
    "install": (cmd_install, "install a package recipe: install package:<entry> [--prefix=DIR]"),
    "run": (cmd_run, "execute a pipeline: run pipeline:<entry> [key=value choice overrides]"),
    "explore": (cmd_explore, "autotune: explore pipeline:<entry> [--strategy] [--seed] [--sample-count]"),
    "replay": (cmd_replay, "re-execute a recorded experiment: replay experiment:<entry>"),
    "compare": (cmd_compare, "validate: compare experiment:<reference> replay=<experiment>"),
    "check-archival": (cmd_check_archival, "check an artifact manifest: check-archival <manifest.json>"),
    "table": (cmd_table, "CSV export: table experiment[:<pattern>] [columns=...] [exploration=<id>]"),
    "plot-data": (cmd_plot_data, "plot series: plot-data experiment:<exploration> x=<key> [y=metric:stat]"),
    "report": (cmd_report, "render a validation report: report experiment:<report>"),
}


def _verb_parser(verb: str, help_text: str) -> argparse.ArgumentParser:
    p = _Parser(prog=f"ckp {verb}", description=help_text,
                epilog="key=value pairs are passed as strings; pipelines coerce them to the "
                       "type of the declared choice default.")
    p.add_argument("target", nargs="?", help="<module_kind>[:<entry>]")
    p.add_argument("kv", nargs="*", metavar="key=value",
                   help="key=value arguments (choice overrides, query fields)")
    p.add_argument("--json", action="store_true", help="emit one JSON object on stdout")
    p.add_argument("--repo", default=None, help="repository to write to (default: first)")
    p.add_argument("--verbose", "-v", action="store_true")
    if verb == "add":
        p.add_argument("--meta", help="meta document as JSON or @file")
        p.add_argument("--payload", help="file or directory copied into the entry")
    if verb == "detect":
        p.add_argument("--no-system-path", action="store_true")
    if verb in ("resolve", "run"):
        p.add_argument("--refresh", action="store_true", help="re-detect before resolving")
    if verb == "run":
        p.add_argument("--keep-scratch", action="store_true")
    if verb == "install":
        p.add_argument("--prefix")
    if verb == "explore":
        p.add_argument("--strategy", choices=("exhaustive", "random"))
        p.add_argument("--seed", type=int)
        p.add_argument("--sample-count", type=int)
        p.add_argument("--parallel", action="store_true")
    if verb == "compare":
        p.add_argument("--tolerance", type=float, default=0.10)
        p.add_argument("--statistic", default="mean")
        p.add_argument("--tolerances", help="ToleranceSpec JSON or @file")
    if verb == "check-archival":
        p.add_argument("--create", action="store_true",
                       help="write the manifest first from components=... archive=...")
    if verb in ("table", "plot-data", "report"):
        p.add_argument("--output", "-o")
    return p


def usage() -> str:
    width = max(len(v) for v in VERBS)
    lines = ["usage: ckp <action> <module_kind>[:<entry>] [key=value]... [--flag]...",
             "       ckp --version | --help | <action> --help", "", "actions:"]
    lines += [f"  {verb:<{width}}  {text}" for verb, (_, text) in VERBS.items()]
    lines += ["", f"module kinds: {', '.join(KINDS)}",
              "environment: CKP_REPOS, CKP_SCRATCH, CKP_SEARCH_DIRS"]
    return "\n".join(lines) + "\n"


def _human(result: dict[str, Any]) -> str:
    if "_text" in result:
        return result["_text"]
    if "script" in result:
        return result["script"]
    if "matches" in result:
        return "".join(f"{m['kind']}:{m['alias'] or m['uid']}  {m['uid']}  "
                       f"[{','.join(m['tags'])}]  ({m['repo']})\n" for m in result["matches"])
    return json.dumps(result, indent=2, sort_keys=True) + "\n"


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    json_mode = "--json" in argv
    out = sys.stdout

    def emit(obj: dict[str, Any]) -> None:
        out.write(json.dumps(obj, sort_keys=True, default=str) + "\n")
        out.flush()

    def fail(code: int, err: dict[str, Any], extra: dict[str, Any] | None = None) -> int:
        if json_mode:
            emit({**(extra or {}), "error": err})
        else:
            print(f"ckp: error: {err['message']}", file=sys.stderr)
        return code

    rest = [a for a in argv if a != "--json"]
    if rest and rest[0] in ("-h", "--help"):
        out.write(usage())
        return 0
    if rest and rest[0] == "--version":
        out.write(f"ckp {__version__}\n")
        return 0
    if not rest:
        if not json_mode:
            sys.stderr.write(usage())
        return fail(2, {"code": "usage", "message": "no action given"})
    verb, rest = rest[0], rest[1:]
    if verb not in VERBS:
        if not json_mode:
            sys.stderr.write(usage())
        return fail(2, {"code": "usage", "message": f"unknown action {verb!r}"})
    parser = _verb_parser(verb, VERBS[verb][1])
    try:
        args = parser.parse_intermixed_args(rest)
        if args.verbose:
            logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                                format="%(levelname)s %(name)s: %(message)s")
        kv = parse_kv(args.kv)
        store = Store.open()
        result = VERBS[verb][0](store, args, kv)
    except UsageError as exc:
        if not json_mode:
            parser.print_usage(sys.stderr)
        return fail(2, {"code": "usage", "message": str(exc)})
    except SystemExit as exc:  # <action> --help
        return exc.code if isinstance(exc.code, int) else 0
    except CkpError as exc:
        extra = {}
        if "experiment" in exc.details:
            extra["experiment"] = exc.details["experiment"]
        return fail(1, exc.to_json(), extra)
    except (OSError, ValueError) as exc:
        return fail(1, {"code": "io_error" if isinstance(exc, OSError) else "invalid_value",
                        "message": str(exc)})
    except Exception as exc:  # keep the one-object contract even on bugs
        log.debug("unexpected error", exc_info=True)
        return fail(1, {"code": "internal", "message": f"{type(exc).__name__}: {exc}"})

    if json_mode:
        emit({k: v for k, v in result.items() if k != "_text"})
    else:
        out.write(_human(result))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
