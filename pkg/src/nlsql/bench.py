"""Benchmark harness: task loading, execution-accuracy scoring, runtime
efficiency and cost-per-query reporting.

A task is scored 1 when its predicted SQL produces the same result set as
the gold SQL: ordered comparison when the gold query has a top-level ORDER
BY, multiset comparison otherwise (the choice is recorded in the report
metadata). Correct tasks additionally earn a runtime ratio
sqrt(gold_runtime / predicted_runtime); the per-task indicator and ratio
aggregate to the two headline scores, and ledger totals divide out to an
average cost per query.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import statistics
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence

from . import sqltext
from .engine import PipelineEngine
from .errors import ConfigurationError, DatasetError, MeasurementError
from .gateway import CostLedger
from .state import Outcome, Question, Route
from .validate import SandboxLimits, StageResult, execute_sandboxed

logger = logging.getLogger(__name__)

Clock = Callable[[], float]

NUMERIC_REL_TOL = 1e-6
DEFAULT_TRIALS = 5


class TaskRoute(Enum):
    LOCAL_ONLY = "local"
    FALLBACK_USED = "fallback"
    FAILED = "failed"


@dataclass(frozen=True)
class BenchTask:
    question_id: str
    question: str
    db_id: str
    gold_sql: str
    evidence_hint: Optional[str] = None


@dataclass(frozen=True)
class TaskResult:
    question_id: str
    predicted_sql: Optional[str]
    indicator: int  # 1 iff predicted and gold result sets match
    e_gold_s: Optional[float]
    e_pred_s: Optional[float]
    r_value: Optional[float]  # sqrt(e_gold / e_pred), present iff indicator == 1
    route: TaskRoute
    cost_dollars: float
    error: Optional[str] = None


@dataclass(frozen=True)
class BenchReport:
    ex: float
    ves: float
    n_tasks: int
    local_fraction: float
    avg_cost_per_query: float
    per_task: tuple[TaskResult, ...]
    metadata: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# task loading


def load_tasks(path: Path | str) -> list[BenchTask]:
    """Load a dev-set task file: a JSON array of records carrying
    question_id, db_id, question, evidence and SQL fields."""
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"task file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(data, list):
        raise DatasetError(f"{path}: expected a JSON array of tasks")
    tasks = []
    for index, record in enumerate(data):
        if not isinstance(record, dict):
            raise DatasetError(f"{path}: record {index} is not an object")
        for required in ("question", "db_id", "SQL"):
            if required not in record:
                raise DatasetError(f"{path}: record {index} is missing field {required!r}")
        evidence = record.get("evidence") or None
        tasks.append(
            BenchTask(
                question_id=str(record.get("question_id", index)),
                question=str(record["question"]),
                db_id=str(record["db_id"]),
                gold_sql=str(record["SQL"]),
                evidence_hint=str(evidence) if evidence else None,
            )
        )
    return tasks


# ---------------------------------------------------------------------------
# result-set comparison


def scalar_equal(a, b) -> bool:
    """Numbers match within 1e-6 relative tolerance, text exactly, null only
    null. Mixed numeric widths (int vs float) compare as numbers."""
    if a is None or b is None:
        return a is None and b is None
    a_num = isinstance(a, (int, float)) and not isinstance(a, bool)
    b_num = isinstance(b, (int, float)) and not isinstance(b, bool)
    if a_num and b_num:
        return math.isclose(a, b, rel_tol=NUMERIC_REL_TOL, abs_tol=0.0)
    if type(a) is not type(b):
        return False
    return a == b


def rows_equal(row_a: Sequence, row_b: Sequence) -> bool:
    return len(row_a) == len(row_b) and all(scalar_equal(a, b) for a, b in zip(row_a, row_b))


def _sort_key(row: Sequence) -> tuple:
    key = []
    for value in row:
        if value is None:
            key.append((0, ""))
        elif isinstance(value, bool):
            key.append((1, float(value)))
        elif isinstance(value, (int, float)):
            key.append((1, float(value)))
        elif isinstance(value, bytes):
            key.append((3, value.hex()))
        else:
            key.append((2, str(value)))
    return tuple(key)


def compare_results(
    gold_rows: Sequence[Sequence],
    pred_rows: Sequence[Sequence],
    gold_has_order_by: bool,
) -> int:
    """Indicator for one task: 1 iff the result sets match.

    Ordered element-wise comparison when the gold query fixes an order,
    multiset comparison otherwise. Always 0 on cardinality mismatch.
    """
    if len(gold_rows) != len(pred_rows):
        return 0
    if gold_has_order_by:
        pairs = zip(gold_rows, pred_rows)
    else:
        # Exact multiset equality short-circuits the common case; otherwise
        # sort both sides canonically and compare pairwise with tolerance.
        try:
            if Counter(map(tuple, gold_rows)) == Counter(map(tuple, pred_rows)):
                return 1
        except TypeError:
            pass
        pairs = zip(
            sorted(gold_rows, key=_sort_key),
            sorted(pred_rows, key=_sort_key),
        )
    return 1 if all(rows_equal(a, b) for a, b in pairs) else 0


# ---------------------------------------------------------------------------
# runtime measurement and efficiency


def measure_runtime(
    sql: str,
    db_path: Path | str,
    trials: int,
    limits: SandboxLimits = SandboxLimits(),
    clock: Clock = time.perf_counter,
) -> float:
    """Median runtime over `trials` timed executions after one discarded
    warm-up run (which also warms the page cache)."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    samples = []
    for run in range(trials + 1):
        outcome = execute_sandboxed(sql, db_path, limits, clock)
        if isinstance(outcome, StageResult):
            raise MeasurementError(
                f"query stopped executing during measurement: {'; '.join(outcome.messages)}"
            )
        if run > 0:
            samples.append(outcome.runtime_s)
    return statistics.median(samples)


def relative_efficiency(e_gold: float, e_pred: float) -> float:
    """sqrt(gold runtime / predicted runtime); rewards faster-than-gold SQL."""
    if e_gold <= 0 or e_pred <= 0:
        raise ValueError("runtimes must be positive")
    return math.sqrt(e_gold / e_pred)


# ---------------------------------------------------------------------------
# aggregation


def compute_report(results: Sequence[TaskResult], ledger: CostLedger) -> BenchReport:
    """Aggregate per-task indicators, ratios, routing and ledger cost."""
    if not results:
        raise ValueError("results must be non-empty")
    n = len(results)
    ex = sum(r.indicator for r in results) / n
    ves = sum(r.indicator * (r.r_value or 0.0) for r in results) / n
    local = sum(1 for r in results if r.route is TaskRoute.LOCAL_ONLY)
    total_cost = ledger.total_cost_dollars
    return BenchReport(
        ex=ex,
        ves=ves,
        n_tasks=n,
        local_fraction=local / n,
        avg_cost_per_query=total_cost / n,
        per_task=tuple(results),
        metadata={"row_comparison": "multiset", "numeric_rel_tol": NUMERIC_REL_TOL},
    )


# ---------------------------------------------------------------------------
# full benchmark run


def run_benchmark(
    tasks: Sequence[BenchTask],
    engine: PipelineEngine,
    workers: int = 1,
    trials: int = DEFAULT_TRIALS,
    runtime_clock: Clock = time.perf_counter,
) -> BenchReport:
    """Run every task through the pipeline and score it.

    Per-task errors never abort the run; they surface as indicator-0 results
    with the error message attached. Runtime measurement is serialized per
    database file so concurrent tasks do not trample each other's caches.
    """
    if not tasks:
        raise ValueError("tasks must be non-empty")
    missing = sorted({t.db_id for t in tasks if not engine.registry.has(t.db_id)})
    if missing:
        raise ConfigurationError(f"missing database(s): {', '.join(missing)}")

    measure_locks: dict[str, threading.Lock] = {}
    locks_guard = threading.Lock()

    def lock_for(db_id: str) -> threading.Lock:
        with locks_guard:
            if db_id not in measure_locks:
                measure_locks[db_id] = threading.Lock()
            return measure_locks[db_id]

    def run_task(task: BenchTask) -> TaskResult:
        try:
            return _run_one(task, engine, trials, runtime_clock, lock_for(task.db_id))
        except Exception as exc:  # defensive: a task must never kill the run
            logger.exception("task %s failed", task.question_id)
            engine.ledger.assign_route(str(task.question_id), "failed")
            return TaskResult(
                question_id=task.question_id,
                predicted_sql=None,
                indicator=0,
                e_gold_s=None,
                e_pred_s=None,
                r_value=None,
                route=TaskRoute.FAILED,
                cost_dollars=engine.ledger.query_cost_dollars(str(task.question_id)),
                error=str(exc),
            )

    if workers <= 1:
        results = [run_task(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_task, tasks))
    return compute_report(results, engine.ledger)


def _run_one(
    task: BenchTask,
    engine: PipelineEngine,
    trials: int,
    runtime_clock: Clock,
    measure_lock: threading.Lock,
) -> TaskResult:
    question = Question(task.question, task.db_id, task.evidence_hint)
    run = engine.run(question, query_id=str(task.question_id))
    db_path = engine.registry.database_path(task.db_id)

    gold_outcome = execute_sandboxed(task.gold_sql, db_path, engine.limits)
    if isinstance(gold_outcome, StageResult):
        # gold queries are supposed to execute; record the violation and move on
        logger.error(
            "gold SQL failed for task %s: %s", task.question_id, gold_outcome.messages
        )
        gold_rows: Optional[tuple] = None
        e_gold = None
    else:
        gold_rows = gold_outcome.rows
        with measure_lock:
            e_gold = measure_runtime(task.gold_sql, db_path, trials, engine.limits, runtime_clock)

    route = TaskRoute.FAILED
    indicator = 0
    e_pred = None
    r_value = None
    predicted_sql = None
    error = None

    if run.result.outcome is Outcome.SUCCESS:
        route = (
            TaskRoute.LOCAL_ONLY
            if run.result.route is Route.LOCAL_ONLY
            else TaskRoute.FALLBACK_USED
        )
        predicted_sql = run.result.sql
        truncated = run.acceptance is not None and run.acceptance.outcome.truncated
        if gold_rows is not None and not truncated:
            indicator = compare_results(
                gold_rows,
                run.result.rows or (),
                sqltext.has_top_level_order_by(task.gold_sql),
            )
        if indicator and predicted_sql:
            with measure_lock:
                e_pred = measure_runtime(
                    predicted_sql, db_path, trials, engine.limits, runtime_clock
                )
            r_value = relative_efficiency(e_gold, e_pred) if e_gold else None
            if r_value is None:
                indicator = 0  # cannot score efficiency without a gold runtime
                e_pred = None
    else:
        error = run.result.outcome.value
        engine.ledger.assign_route(str(task.question_id), "failed")

    return TaskResult(
        question_id=task.question_id,
        predicted_sql=predicted_sql,
        indicator=indicator,
        e_gold_s=e_gold,
        e_pred_s=e_pred,
        r_value=r_value,
        route=route,
        cost_dollars=engine.ledger.query_cost_dollars(str(task.question_id)),
        error=error,
    )


# ---------------------------------------------------------------------------
# report output


def write_report_json(report: BenchReport, path: Path | str) -> None:
    payload = {
        "ex": report.ex,
        "ves": report.ves,
        "n_tasks": report.n_tasks,
        "local_fraction": report.local_fraction,
        "avg_cost_per_query": report.avg_cost_per_query,
        "metadata": report.metadata,
        "per_task": [
            {
                "question_id": r.question_id,
                "predicted_sql": r.predicted_sql,
                "indicator": r.indicator,
                "e_gold_ms": None if r.e_gold_s is None else r.e_gold_s * 1000.0,
                "e_pred_ms": None if r.e_pred_s is None else r.e_pred_s * 1000.0,
                "r_value": r.r_value,
                "route": r.route.value,
                "cost": r.cost_dollars,
                "error": r.error,
            }
            for r in report.per_task
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def write_report_csv(report: BenchReport, path: Path | str) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["question_id", "indicator", "r_value", "route", "cost", "e_gold_ms", "e_pred_ms"]
        )
        for r in report.per_task:
            writer.writerow(
                [
                    r.question_id,
                    r.indicator,
                    "" if r.r_value is None else f"{r.r_value:.6f}",
                    r.route.value,
                    f"{r.cost_dollars:.4f}",
                    "" if r.e_gold_s is None else f"{r.e_gold_s * 1000.0:.3f}",
                    "" if r.e_pred_s is None else f"{r.e_pred_s * 1000.0:.3f}",
                ]
            )


def format_summary(report: BenchReport) -> str:
    lines = [
        f"{'tasks':<22}{report.n_tasks}",
        f"{'EX %':<22}{report.ex * 100:.2f}",
        f"{'VES %':<22}{report.ves * 100:.2f}",
        f"{'local fraction %':<22}{report.local_fraction * 100:.2f}",
        f"{'avg cost / query $':<22}{report.avg_cost_per_query:.4f}",
    ]
    return "\n".join(lines)
