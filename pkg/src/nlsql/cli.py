"""Command-line entry point.

Subcommands: index (build the embedding cache), query (one-shot question),
eval (batch benchmark run), repl (interactive loop). Exit codes are a
stable contract: 0 success, 1 usage or configuration error, 2 generation
failure, 3 dataset or setup error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import schema as schema_mod
from .bench import format_summary, load_tasks, run_benchmark, write_report_csv, write_report_json
from .config import (
    DEFAULT_CONFIG_NAME,
    AppConfig,
    apply_env_overrides,
    load_config,
    materialize_backends,
)
from .engine import EngineRunResult, PipelineEngine
from .errors import (
    ConfigurationError,
    DatasetError,
    ExtractionError,
    NlsqlError,
    PlanParseError,
)
from .gateway import CostLedger, Role
from .state import DatabaseRegistry, Outcome, Question, Route

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_GENERATION = 2
EXIT_SETUP = 3

DISPLAY_ROW_CAP = 50


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; we reserve that
        self.print_usage(sys.stderr)
        raise SystemExit_Usage(message)


class SystemExit_Usage(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nlsql", description="Schema-aware NL2SQL pipeline")
    parser.add_argument(
        "--config",
        default=None,
        help=f"config file (default: $NLSQL_CONFIG or ./{DEFAULT_CONFIG_NAME})",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_index = sub.add_parser("index", help="build the embedding cache for a database")
    p_index.add_argument("db_id")

    p_query = sub.add_parser("query", help="answer one question")
    p_query.add_argument("db_id")
    p_query.add_argument("question")
    p_query.add_argument("--json", action="store_true", dest="as_json")
    p_query.add_argument("--strict-semantic", action="store_true", default=None)

    p_eval = sub.add_parser("eval", help="run a benchmark task file")
    p_eval.add_argument("tasks_file")
    p_eval.add_argument("--workers", type=int, default=None)
    p_eval.add_argument("--out", default=".")

    p_repl = sub.add_parser("repl", help="interactive question loop")
    p_repl.add_argument("db_id")
    return parser


def _resolve_config(path_arg: Optional[str]) -> AppConfig:
    path = path_arg or os.environ.get("NLSQL_CONFIG") or DEFAULT_CONFIG_NAME
    config = load_config(path)
    return apply_env_overrides(config)


def _build_engine(config: AppConfig, strict_override: Optional[bool] = None) -> PipelineEngine:
    strict = config.strict_semantic if strict_override is None else strict_override
    return PipelineEngine(
        registry=DatabaseRegistry(config.databases_root),
        backends=materialize_backends(config),
        retrieval=config.retrieval,
        limits=config.sandbox,
        strict_semantic=strict,
        ledger=CostLedger(),
        api_token=os.environ.get("NLSQL_FALLBACK_TOKEN"),
    )


# ---------------------------------------------------------------------------
# commands


def cmd_index(config: AppConfig, db_id: str) -> int:
    registry = DatabaseRegistry(config.databases_root)
    registry.database_path(db_id)  # raises ConfigurationError when unknown
    docs_path = registry.docs_path(db_id)
    if not docs_path.is_file():
        raise ExtractionError(f"documentation file not found: {docs_path}")
    if not registry.evidence_path(db_id).is_file():
        print(f"note: no evidence file at {registry.evidence_path(db_id)} (optional)")
    records = schema_mod.load_doc_records(docs_path)
    embedder = materialize_backends(config)[Role.EMBEDDER]
    dim = config.retrieval.embed_dim
    ids = [rec["id"] for rec in records]
    matrix = np.stack([schema_mod.embed(embedder, rec["text"], dim) for rec in records]) if records else np.zeros((0, dim), dtype=np.float32)
    cache_path = registry.cache_path(db_id)
    schema_mod.write_embedding_cache(cache_path, ids, matrix)
    print(f"wrote {cache_path} ({len(ids)} segments, dim {dim})")
    return EXIT_OK


def _format_rows(columns: Sequence[str], rows: Sequence[Sequence]) -> str:
    if not rows:
        return "(no rows)"
    shown = [tuple(str(v) for v in row) for row in rows[:DISPLAY_ROW_CAP]]
    headers = [str(c) for c in columns] if columns else [f"c{i}" for i in range(len(shown[0]))]
    widths = [len(h) for h in headers]
    for row in shown:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)),
        "  ".join("-" * w for w in widths),
    ]
    for row in shown:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)))
    hidden = len(rows) - len(shown)
    if hidden > 0:
        lines.append(f"... {hidden} more rows")
    return "\n".join(lines)


def _route_label(run: EngineRunResult) -> str:
    result = run.result
    if result.outcome is not Outcome.SUCCESS:
        return "failed"
    if result.route is Route.LOCAL_ONLY:
        return "local"
    return f"fallback (attempt {result.fallback_attempts})"


def _print_run(run: EngineRunResult, engine: PipelineEngine, as_json: bool) -> None:
    result = run.result
    cost = engine.ledger.query_cost_dollars(run.query_id)
    if as_json:
        columns = list(run.acceptance.outcome.column_names) if run.acceptance else []
        payload = {
            "outcome": result.outcome.value,
            "sql": result.sql,
            "columns": columns,
            "rows": [list(r) for r in (result.rows or ())],
            "route": _route_label(run),
            "fallback_attempts": result.fallback_attempts,
            "cost": cost,
        }
        print(json.dumps(payload))
        return
    print(f"SQL: {result.sql}")
    columns = run.acceptance.outcome.column_names if run.acceptance else ()
    print(_format_rows(columns, result.rows or ()))
    print(f"route: {_route_label(run)}")
    print(f"cost: ${cost:.4f}")


def cmd_query(config: AppConfig, db_id: str, question_text: str, as_json: bool, strict: Optional[bool]) -> int:
    engine = _build_engine(config, strict_override=strict)
    question = Question(question_text, db_id)
    try:
        run = engine.run(question)
    except PlanParseError as exc:
        print(f"decomposition failed: {exc}", file=sys.stderr)
        return EXIT_GENERATION
    result = run.result
    if result.outcome is Outcome.EXTRACTION_FAILURE:
        print("extraction failure: the database could not be introspected", file=sys.stderr)
        return EXIT_SETUP
    if result.outcome is Outcome.GENERATION_FAILURE:
        print(
            f"generation failure after {result.fallback_attempts} attempts", file=sys.stderr
        )
        if run.generation is not None and run.generation.bundle_history:
            last = run.generation.bundle_history[-1]
            for msg in last.execution_errors:
                print(f"  error: {msg}", file=sys.stderr)
            for msg in last.validation_warnings:
                print(f"  warning: {msg}", file=sys.stderr)
            if last.failed_sql:
                print(f"  failed SQL: {last.failed_sql}", file=sys.stderr)
        return EXIT_GENERATION
    _print_run(run, engine, as_json)
    return EXIT_OK


def cmd_eval(config: AppConfig, tasks_file: str, workers: Optional[int], out_dir: str) -> int:
    tasks = load_tasks(tasks_file)
    if not tasks:
        print("task file is empty", file=sys.stderr)
        return EXIT_SETUP
    engine = _build_engine(config)
    n_workers = workers if workers is not None else config.eval.workers
    report = run_benchmark(tasks, engine, workers=n_workers, trials=config.eval.trials)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_report_json(report, out / "report.json")
    write_report_csv(report, out / "report.csv")
    print(format_summary(report))
    print(f"reports written to {out / 'report.json'} and {out / 'report.csv'}")
    return EXIT_OK


def cmd_repl(config: AppConfig, db_id: str) -> int:
    engine = _build_engine(config)
    print(f"connected to {db_id}; \\q quits, \\cost shows the session ledger")
    while True:
        try:
            line = input("nlsql> ")
        except EOFError:
            print()
            return EXIT_OK
        line = line.strip()
        if not line:
            continue
        if line == "\\q":
            return EXIT_OK
        if line == "\\cost":
            print(f"session cost: ${engine.ledger.total_cost_dollars:.4f}")
            continue
        try:
            run = engine.run(Question(line, db_id))
        except NlsqlError as exc:
            print(f"error: {exc}", file=sys.stderr)
            continue
        if run.result.outcome is Outcome.SUCCESS:
            _print_run(run, engine, as_json=False)
        else:
            print(f"{run.result.outcome.value}", file=sys.stderr)


# ---------------------------------------------------------------------------
# entry point


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get("NLSQL_LOG", "WARNING"))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit_Usage as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        config = _resolve_config(args.config)
        if args.command == "index":
            return cmd_index(config, args.db_id)
        if args.command == "query":
            return cmd_query(config, args.db_id, args.question, args.as_json, args.strict_semantic)
        if args.command == "eval":
            return cmd_eval(config, args.tasks_file, args.workers, args.out)
        if args.command == "repl":
            return cmd_repl(config, args.db_id)
        raise ConfigurationError(f"unknown command {args.command!r}")
    except ConfigurationError as exc:
        message = str(exc)
        print(f"configuration error: {message}", file=sys.stderr)
        # a database missing from disk is a setup problem, not a config typo
        return EXIT_SETUP if "database" in message else EXIT_USAGE
    except (DatasetError, ExtractionError) as exc:
        print(f"setup error: {exc}", file=sys.stderr)
        return EXIT_SETUP
    except NlsqlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GENERATION


if __name__ == "__main__":
    sys.exit(main())
