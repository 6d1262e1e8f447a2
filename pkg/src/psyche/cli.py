"""Command-line interface.

Subcommands mirror the workflow: develop rules offline, run questions through
the pipeline, evaluate and compare record files, inspect consistency
densities, build and export fine-tuning data, review samples, ingest fallback
handoffs, and import public dataset formats into the question schema.

Settings layer as defaults, then a ``--config`` JSON file, then explicit
flags. The only environment coupling is the API key variable named in the
backend config. Failures print one machine-readable JSON line to stderr and
exit 1; argparse usage errors keep their conventional exit 2.
"""

from __future__ import annotations

import argparse
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

from .backend import HttpBackend, load_backend_config, mock_from_json
from .dataset import (
    REVIEW_STATUSES,
    RecordStore,
    build_training_samples,
    load_split_manifest,
)
from .errors import InputError, PsycheError
from .evaluation import (
    compute_metrics,
    consistency_distribution,
    decomposition_check,
    items_from_records,
    kde_density,
    pairwise_compare,
)
from .pipeline import (
    FallbackConfig,
    FallbackHook,
    PipelineConfig,
    build_manifest,
    develop_rules,
    ingest_handoffs,
    read_records,
    run_batch,
    write_records,
)
from .roles import (
    ExampleSet,
    load_examples,
    load_questions,
    load_rules,
    save_rules,
)
from .templates import TemplateLibrary
from .util import atomic_write_text, canonical_json

_CONFIG_KEYS = {
    "mode",
    "l",
    "m",
    "n",
    "temperature",
    "max_tokens",
    "superego_enabled",
    "superego_rules_enabled",
    "ego_enabled",
    "fallback",
}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _emit(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out:
        atomic_write_text(Path(out), text + "\n")
    else:
        print(text)


def _templates(args) -> TemplateLibrary:
    if getattr(args, "templates_dir", None):
        return TemplateLibrary.from_dir(args.templates_dir)
    return TemplateLibrary.default()


def _backend(args):
    if args.fixtures:
        return mock_from_json(args.fixtures)
    return HttpBackend(load_backend_config(args.backend_config))


def _add_backend_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_mutually_exclusive_group(required=True)
    group.add_argument(
        "--backend-config", help="JSON backend connection settings (HTTP backend)"
    )
    group.add_argument(
        "--fixtures", help="JSON fixture queue (offline mock backend)"
    )


def _read_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise InputError(f"config {path} must be a JSON object")
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise InputError(f"unknown config keys: {sorted(unknown)}")
    return raw


def _pipeline_config(args) -> PipelineConfig:
    """Defaults, overlaid by the config file, overlaid by explicit flags."""
    settings = _read_config_file(getattr(args, "config", None))
    for key in ("mode", "l", "m", "n", "temperature", "max_tokens"):
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    mode = settings.pop("mode", "standard")
    threshold = getattr(args, "fallback_threshold", None)
    if threshold is not None:
        candidates = getattr(args, "fallback_candidates", None)
        settings["fallback"] = {
            "candidates": candidates if candidates is not None else settings.get("l", 5),
            "threshold": threshold,
            "command": getattr(args, "fallback_command", "") or "",
            "out_dir": getattr(args, "fallback_dir", None) or "fallback",
        }
    if mode == "cot-sc":
        settings.update(
            mode="standard",
            superego_enabled=False,
            superego_rules_enabled=False,
            ego_enabled=False,
        )
    else:
        settings["mode"] = mode
    return PipelineConfig.from_dict(settings)


def _cmd_rules_develop(args) -> int:
    backend = _backend(args)
    templates = _templates(args)
    questions = load_questions(args.questions)
    examples = load_examples(args.examples) if args.examples else ExampleSet(examples=())
    from .backend import CallLedger

    ledger = CallLedger()
    rules = develop_rules(
        backend,
        templates,
        questions,
        examples,
        l=args.l if args.l is not None else 5,
        m=args.m if args.m is not None else 3,
        n=args.n if args.n is not None else 10,
        temperature=args.temperature if args.temperature is not None else 0.7,
        ledger=ledger,
    )
    save_rules(rules, args.out)
    _emit(
        {
            "rules": len(rules.rules),
            "rules_digest": rules.digest(),
            "total_calls": ledger.total_calls,
            "out": args.out,
        },
        None,
    )
    return 0


def _cmd_run(args) -> int:
    backend = _backend(args)
    templates = _templates(args)
    questions = load_questions(args.questions)
    examples = load_examples(args.examples) if args.examples else ExampleSet(examples=())
    config = _pipeline_config(args)
    rules = load_rules(args.rules) if args.rules else None
    hook = None
    if config.fallback is not None:
        hook = FallbackHook(config.fallback.out_dir, command=config.fallback.command)
    started = _now()
    records = run_batch(
        backend,
        templates,
        questions,
        examples,
        config,
        rules,
        workers=args.workers,
        fallback_hook=hook,
    )
    write_records(args.out, records)
    manifest = build_manifest(
        config,
        templates,
        rules,
        questions,
        records,
        started_at=started,
        finished_at=_now(),
    )
    manifest_path = args.manifest or str(Path(args.out).with_suffix(".manifest.json"))
    atomic_write_text(Path(manifest_path), canonical_json(manifest.to_dict()) + "\n")
    _emit(
        {
            "run_id": manifest.run_id,
            "records": manifest.record_count,
            "failed": manifest.failed_count,
            "total_calls": manifest.total_calls,
            "out": args.out,
            "manifest": manifest_path,
        },
        None,
    )
    return 0


def _cmd_eval(args) -> int:
    records = read_records(args.records)
    items = items_from_records(records)
    metrics = decomposition_check(items) if args.check else compute_metrics(items)
    _emit(
        {
            "metrics": metrics.to_dict(),
            "consistency_distribution": {
                str(k): v for k, v in consistency_distribution(items).items()
            },
            "checked": bool(args.check),
        },
        args.out,
    )
    return 0


def _cmd_compare(args) -> int:
    items_a = items_from_records(read_records(args.records_a))
    items_b = items_from_records(read_records(args.records_b))
    comparison = pairwise_compare(items_a, items_b)
    payload = comparison.to_dict()
    payload["metrics_a"] = compute_metrics(items_a).to_dict()
    payload["metrics_b"] = compute_metrics(items_b).to_dict()
    _emit(payload, args.out)
    return 0


def _cmd_density(args) -> int:
    records = read_records(args.records)
    items = items_from_records(records)
    values = [float(item.consistency) for item in items]
    table = kde_density(
        values,
        grid_size=args.grid_size,
        bandwidth=args.bandwidth,
    )
    payload = table.to_dict()
    payload["values"] = len(values)
    payload["distribution"] = {
        str(k): v for k, v in consistency_distribution(items).items()
    }
    _emit(payload, args.out)
    return 0


def _cmd_export(args) -> int:
    if not args.build_only and not args.out:
        raise InputError("export needs --out (or --build-only)")
    if args.store and Path(args.store).exists():
        store = RecordStore.load(args.store)
    else:
        store = RecordStore()
    added = 0
    if args.records:
        templates = _templates(args)
        examples = (
            load_examples(args.examples) if args.examples else ExampleSet(examples=())
        )
        samples = build_training_samples(
            read_records(args.records),
            templates,
            examples,
            max_input_tokens=args.max_input_tokens,
            require_correct=not args.keep_incorrect,
        )
        fresh = [s for s in samples if not _in_store(store, s.sample_id)]
        added = store.add_many(fresh)
    if args.store:
        store.save(args.store)
    summary: dict = {"store": args.store, "added": added, "samples": len(store)}
    if not args.build_only:
        test_qids = (
            load_split_manifest(args.test_split) if args.test_split else frozenset()
        )
        stages = tuple(args.stages) if args.stages else (1, 2)
        summary["export"] = store.export(
            args.out,
            min_status=args.min_status,
            test_qids=test_qids,
            stages=stages,
        )
        summary["out"] = args.out
    _emit(summary, None)
    return 0


def _in_store(store: RecordStore, sample_id: str) -> bool:
    try:
        store.get(sample_id)
        return True
    except InputError:
        return False


def _cmd_review(args) -> int:
    store = RecordStore.load(args.store)
    targets = args.sample_ids
    if args.all:
        targets = [s.sample_id for s in store]
    if not targets:
        raise InputError("nothing to review: give sample ids or --all")
    for sample_id in targets:
        store.review(sample_id, args.status)
    store.save(args.store)
    _emit({"reviewed": len(targets), "status": args.status, "counts": store.status_counts()}, None)
    return 0


def _cmd_ingest(args) -> int:
    records = read_records(args.records)
    updated, changed = ingest_handoffs(records, args.handoffs)
    out = args.out or args.records
    write_records(out, updated)
    _emit({"records": len(updated), "replaced": changed, "out": out}, None)
    return 0


def _extract_boxed(solution: str) -> str:
    marker = "\\boxed{"
    start = solution.rfind(marker)
    if start < 0:
        raise InputError("no boxed answer in solution")
    i = start + len(marker)
    depth = 1
    out = []
    while i < len(solution) and depth:
        ch = solution[i]
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if not depth:
                break
        out.append(ch)
        i += 1
    if depth:
        raise InputError("unbalanced boxed answer in solution")
    return "".join(out)


def _iter_source_rows(path: str) -> list[dict]:
    text = Path(path).read_text(encoding="utf-8").strip()
    if not text:
        raise InputError(f"{path} is empty")
    if text.startswith("["):
        rows = json.loads(text)
        if not isinstance(rows, list):
            raise InputError(f"{path} must hold a JSON list or JSONL")
        return rows
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def _import_rows(source: str, rows: list[dict]) -> list[dict]:
    out = []
    for i, row in enumerate(rows):
        try:
            if source == "gsm8k":
                gold = row["answer"].split("####")[-1].strip()
                out.append(
                    {
                        "qid": f"gsm8k-{i}",
                        "text": row["question"],
                        "gold": gold,
                        "task_kind": "math",
                    }
                )
            elif source == "math":
                out.append(
                    {
                        "qid": f"math-{i}",
                        "text": row["problem"],
                        "gold": _extract_boxed(row["solution"]),
                        "task_kind": "math",
                    }
                )
            else:  # hotpotqa and 2wiki share a shape
                out.append(
                    {
                        "qid": str(row.get("_id", f"{source}-{i}")),
                        "text": row["question"],
                        "gold": row["answer"],
                        "task_kind": "textual",
                    }
                )
        except (KeyError, TypeError) as exc:
            raise InputError(f"bad {source} row {i}: {exc}") from exc
    return out


def _cmd_import_questions(args) -> int:
    rows = _iter_source_rows(args.input)
    questions = _import_rows(args.source, rows)
    lines = [canonical_json(q) for q in questions]
    atomic_write_text(Path(args.out), "\n".join(lines) + "\n")
    _emit({"source": args.source, "questions": len(questions), "out": args.out}, None)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="psyche",
        description="Three-role reasoning pipeline: run, evaluate, distill.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rules-develop", help="learn a rule list from wrong answers")
    p.add_argument("--questions", required=True, help="JSONL questions with gold answers")
    p.add_argument("--examples", help="JSONL few-shot exemplars for the id role")
    p.add_argument("--l", type=int, help="sampled paths per question (default 5)")
    p.add_argument("--m", type=int, help="error patterns per wrong question (default 3)")
    p.add_argument("--n", type=int, help="rules in the final list (default 10)")
    p.add_argument("--temperature", type=float, help="id sampling temperature (default 0.7)")
    p.add_argument("--templates-dir", help="directory of prompt template overrides")
    p.add_argument("--out", required=True, help="where to write the rules JSON")
    _add_backend_flags(p)
    p.set_defaults(func=_cmd_rules_develop)

    p = sub.add_parser("run", help="answer questions with the pipeline")
    p.add_argument("--questions", required=True)
    p.add_argument("--examples", help="JSONL few-shot exemplars for the id role")
    p.add_argument("--mode", choices=["standard", "merged", "cot-sc"])
    p.add_argument("--config", help="JSON file with pipeline settings")
    p.add_argument("--rules", help="rules JSON from rules-develop")
    p.add_argument("--l", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--max-tokens", type=int, dest="max_tokens")
    p.add_argument(
        "--fallback-threshold",
        "--z",
        dest="fallback_threshold",
        type=int,
        help="hand off records with consistency strictly below this",
    )
    p.add_argument("--fallback-candidates", type=int)
    p.add_argument("--fallback-dir")
    p.add_argument("--fallback-command", help="command to run per handoff; {handoff} expands")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--templates-dir")
    p.add_argument("--out", required=True, help="records JSONL")
    p.add_argument("--manifest", help="manifest path (default: next to --out)")
    _add_backend_flags(p)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("eval", help="score a records file")
    p.add_argument("--records", required=True)
    p.add_argument("--check", action="store_true", help="verify metric identities too")
    p.add_argument("--out", help="write the report here instead of stdout")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("compare", help="question-level contingency of two runs")
    p.add_argument("--records-a", required=True)
    p.add_argument("--records-b", required=True)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("density", help="consistency density estimate for a run")
    p.add_argument("--records", required=True)
    p.add_argument("--grid-size", type=int, default=256)
    p.add_argument("--bandwidth", type=float)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_density)

    p = sub.add_parser("export", help="build and export fine-tuning samples")
    p.add_argument("--records", help="records JSONL to build new samples from")
    p.add_argument("--store", help="sample store JSONL (created when missing)")
    p.add_argument("--examples", help="exemplars used to render stage-1 prompts")
    p.add_argument("--templates-dir")
    p.add_argument("--max-input-tokens", type=int, default=4096)
    p.add_argument(
        "--keep-incorrect",
        action="store_true",
        help="also build samples from records that answered wrong",
    )
    p.add_argument("--min-status", choices=list(REVIEW_STATUSES), default="reviewed")
    p.add_argument("--stages", type=int, nargs="+", choices=[1, 2])
    p.add_argument("--test-split", help="manifest of held-out qids; export aborts on overlap")
    p.add_argument("--build-only", action="store_true", help="update the store, skip export")
    p.add_argument("--out", help="trainer-ready JSONL")
    p.set_defaults(func=_cmd_export)

    p = sub.add_parser("review", help="advance samples through review")
    p.add_argument("--store", required=True)
    p.add_argument("--status", required=True, choices=list(REVIEW_STATUSES))
    p.add_argument("--sample-ids", nargs="*", default=[])
    p.add_argument("--all", action="store_true")
    p.set_defaults(func=_cmd_review)

    p = sub.add_parser("ingest", help="fold answered fallback handoffs into records")
    p.add_argument("--records", required=True)
    p.add_argument("--handoffs", required=True, help="directory of handoff JSON files")
    p.add_argument("--out", help="default: rewrite --records in place")
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("import-questions", help="convert public dataset formats")
    p.add_argument("--source", required=True, choices=["gsm8k", "math", "hotpotqa", "2wiki"])
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_import_questions)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PsycheError as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
