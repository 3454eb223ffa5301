"""Harness unit tests: task loading, result comparison, runtime measurement,
the two headline metrics and full benchmark runs over scripted engines."""

from __future__ import annotations

import json

import pytest
from hypothesis import given, strategies as st

from nlsql.bench import (
    BenchTask,
    TaskResult,
    TaskRoute,
    compare_results,
    compute_report,
    load_tasks,
    measure_runtime,
    relative_efficiency,
    run_benchmark,
    write_report_csv,
    write_report_json,
)
from nlsql.errors import ConfigurationError, DatasetError, MeasurementError
from nlsql.gateway import CostLedger

from conftest import COUNT_PLAN, DB_ID, NAMES_PLAN, fenced, make_engine


# ---------------------------------------------------------------------------
# load_tasks


def write_tasks(path, records):
    path.write_text(json.dumps(records), encoding="utf-8")
    return path


def test_load_tasks_three_records(tmp_path):
    records = [
        {"question_id": i, "db_id": DB_ID, "question": f"q{i}", "evidence": "", "SQL": "SELECT 1"}
        for i in range(3)
    ]
    tasks = load_tasks(write_tasks(tmp_path / "t.json", records))
    assert len(tasks) == 3
    assert tasks[0].question_id == "0"
    assert tasks[0].evidence_hint is None  # empty evidence collapses to None


def test_load_tasks_missing_sql_field_names_index(tmp_path):
    records = [
        {"question_id": 0, "db_id": DB_ID, "question": "q", "SQL": "SELECT 1"},
        {"question_id": 1, "db_id": DB_ID, "question": "q"},
    ]
    with pytest.raises(DatasetError, match="record 1"):
        load_tasks(write_tasks(tmp_path / "t.json", records))


def test_load_tasks_empty_array(tmp_path):
    assert load_tasks(write_tasks(tmp_path / "t.json", [])) == []


def test_load_tasks_missing_file(tmp_path):
    with pytest.raises(DatasetError):
        load_tasks(tmp_path / "absent.json")


# ---------------------------------------------------------------------------
# compare_results


def test_compare_permuted_rows_equal_without_order_by():
    gold = [("A", 1), ("B", 2)]
    pred = [("B", 2), ("A", 1)]
    assert compare_results(gold, pred, gold_has_order_by=False) == 1


def test_compare_ordered_enforced_with_order_by():
    gold = [("A", 1), ("B", 2)]
    pred = [("B", 2), ("A", 1)]
    assert compare_results(gold, pred, gold_has_order_by=True) == 0
    assert compare_results(gold, gold, gold_has_order_by=True) == 1


def test_compare_multiset_cardinality():
    assert compare_results([(1,)], [(1,), (1,)], gold_has_order_by=False) == 0
    assert compare_results([(1,), (1,)], [(1,), (1,)], gold_has_order_by=False) == 1


def test_compare_numeric_tolerance():
    assert compare_results([(1.0,)], [(1.0 + 1e-9,)], False) == 1
    assert compare_results([(1.0,)], [(1.001,)], False) == 0
    # int vs float compare as numbers
    assert compare_results([(2,)], [(2.0,)], False) == 1


def test_compare_null_semantics():
    assert compare_results([(None,)], [(None,)], False) == 1
    assert compare_results([(None,)], [(0,)], False) == 0
    assert compare_results([(None,)], [("",)], False) == 0


def test_compare_text_exact():
    assert compare_results([("a",)], [("A",)], False) == 0


def test_compare_equivalent_queries_on_fixture(db_path):
    from nlsql.validate import execute_sandboxed

    gold = execute_sandboxed("SELECT sname FROM schools WHERE charter = 'Y'", db_path)
    pred = execute_sandboxed(
        "SELECT sname FROM schools WHERE charter IN ('Y') ORDER BY cdscode DESC", db_path
    )
    assert compare_results(gold.rows, pred.rows, gold_has_order_by=False) == 1


@given(st.lists(st.tuples(st.integers(-5, 5), st.text(max_size=3)), max_size=6), st.randoms())
def test_compare_permutation_invariance(rows, rnd):
    shuffled = list(rows)
    rnd.shuffle(shuffled)
    assert compare_results(rows, shuffled, gold_has_order_by=False) == 1


# ---------------------------------------------------------------------------
# runtime measurement


class FakeClock:
    """Returns scripted instants; every call pops the next value."""

    def __init__(self, values):
        self.values = list(values)

    def __call__(self):
        return self.values.pop(0) if self.values else 1e9


def test_measure_runtime_median_with_fake_clock(db_path, monkeypatch):
    import nlsql.bench as bench_mod
    from nlsql.validate import ExecutionOutcome

    runtimes = iter([0.010, 0.020, 0.030, 0.040])

    def fake_execute(sql, db, limits, clock):
        return ExecutionOutcome((), ("c",), next(runtimes), False)

    monkeypatch.setattr(bench_mod, "execute_sandboxed", fake_execute)
    # warm-up discarded, median of 20/30/40 ms
    assert measure_runtime("SELECT 1", db_path, trials=3) == pytest.approx(0.030)


def test_measure_runtime_single_trial(db_path, monkeypatch):
    import nlsql.bench as bench_mod
    from nlsql.validate import ExecutionOutcome

    runtimes = iter([0.005, 0.007])

    def fake_execute(sql, db, limits, clock):
        return ExecutionOutcome((), ("c",), next(runtimes), False)

    monkeypatch.setattr(bench_mod, "execute_sandboxed", fake_execute)
    assert measure_runtime("SELECT 1", db_path, trials=1) == pytest.approx(0.007)


def test_measure_runtime_real_clock_positive(db_path):
    assert measure_runtime("SELECT 1", db_path, trials=2) > 0


def test_measure_runtime_failure_raises(db_path):
    with pytest.raises(MeasurementError):
        measure_runtime("SELECT nope FROM schools", db_path, trials=2)


def test_measure_runtime_requires_trials(db_path):
    with pytest.raises(ValueError):
        measure_runtime("SELECT 1", db_path, trials=0)


# ---------------------------------------------------------------------------
# relative efficiency


def test_relative_efficiency_values():
    assert relative_efficiency(0.1, 0.1) == pytest.approx(1.0, abs=1e-12)
    assert relative_efficiency(100.0, 25.0) == pytest.approx(2.0, abs=1e-12)
    assert relative_efficiency(50.0, 200.0) == pytest.approx(0.5, abs=1e-12)


def test_relative_efficiency_domain():
    with pytest.raises(ValueError):
        relative_efficiency(0.0, 1.0)
    with pytest.raises(ValueError):
        relative_efficiency(1.0, -1.0)


# ---------------------------------------------------------------------------
# compute_report


def task_result(qid, indicator, r_value, route=TaskRoute.LOCAL_ONLY, cost=0.0):
    return TaskResult(
        question_id=str(qid),
        predicted_sql="SELECT 1" if indicator else None,
        indicator=indicator,
        e_gold_s=0.01,
        e_pred_s=0.01 if indicator else None,
        r_value=r_value,
        route=route,
        cost_dollars=cost,
    )


def test_compute_report_direct_substitution():
    results = [
        task_result(0, 1, 1.0),
        task_result(1, 0, None, TaskRoute.FAILED),
        task_result(2, 1, 1.0),
    ]
    report = compute_report(results, CostLedger())
    assert report.ex == pytest.approx(2 / 3, abs=1e-15)
    assert report.ves == pytest.approx(2 / 3, abs=1e-15)
    assert report.local_fraction == pytest.approx(2 / 3, abs=1e-15)


def test_compute_report_all_correct_unit_ratio():
    results = [task_result(i, 1, 1.0) for i in range(4)]
    report = compute_report(results, CostLedger())
    assert report.ves == report.ex == 1.0


def test_compute_report_ratio_shifts_ves_above_ex():
    results = [task_result(0, 1, 2.0), task_result(1, 0, None, TaskRoute.FAILED)]
    report = compute_report(results, CostLedger())
    assert report.ex == pytest.approx(0.5)
    assert report.ves == pytest.approx(1.0)


def test_compute_report_permutation_invariant():
    results = [
        task_result(0, 1, 1.5),
        task_result(1, 0, None, TaskRoute.FAILED),
        task_result(2, 1, 0.5, TaskRoute.FALLBACK_USED),
    ]
    a = compute_report(results, CostLedger())
    b = compute_report(list(reversed(results)), CostLedger())
    assert a.ex == b.ex and a.ves == b.ves and a.local_fraction == b.local_fraction


def test_compute_report_rejects_empty():
    with pytest.raises(ValueError):
        compute_report([], CostLedger())


# ---------------------------------------------------------------------------
# run_benchmark with scripted engines


def constant_step_clock(step=2.0**-10):
    # power-of-two step: consecutive differences are exact in floating point,
    # so every measured elapsed equals `step` regardless of call ordering
    state = [0]

    def clock():
        state[0] += 1
        return state[0] * step

    return clock


FIXTURE_TASKS = [
    {
        "question_id": 0,
        "db_id": DB_ID,
        "question": "how many schools are there",
        "evidence": "",
        "SQL": "SELECT COUNT(*) FROM schools",
    },
    {
        "question_id": 1,
        "db_id": DB_ID,
        "question": "list charter school names",
        "evidence": "",
        "SQL": "SELECT sname FROM schools WHERE charter = 'Y'",
    },
    {
        "question_id": 2,
        "db_id": DB_ID,
        "question": "how many test takers in total",
        "evidence": "",
        "SQL": "SELECT SUM(numtsttakr) FROM satscores",
    },
    {
        "question_id": 3,
        "db_id": DB_ID,
        "question": "names of schools with sat scores",
        "evidence": "",
        "SQL": "SELECT sname FROM schools JOIN satscores ON schools.cdscode = satscores.cds",
    },
    {
        "question_id": 4,
        "db_id": DB_ID,
        "question": "which school is listed first",
        "evidence": "",
        "SQL": "SELECT sname FROM schools ORDER BY cdscode LIMIT 1",
    },
]

SUM_PLAN = """ENTITIES
test takers\tsatscores.numtsttakr\tsum target
CONDITIONS
STEPS
s1\tsum all test takers\t-
OUTPUT
columns\tSUM(numtsttakr)
"""

JOIN_PLAN = """ENTITIES
school names\tschools.sname\toutput column
sat scores\tsatscores\tjoin target
CONDITIONS
STEPS
s1\tjoin schools to satscores and project names\t-
OUTPUT
columns\tschools.sname
"""

DECOMPOSER_FIXTURES = {
    "how many schools are there": COUNT_PLAN,
    "list charter school names": NAMES_PLAN,
    "how many test takers in total": SUM_PLAN,
    "names of schools with sat scores": JOIN_PLAN,
    "which school is listed first": NAMES_PLAN,
}

PRIMARY_FIXTURES = {
    "how many schools are there": fenced("SELECT COUNT(*) FROM schools", "sql"),
    "list charter school names": fenced("SELECT sname FROM schools WHERE charter = 'Y'", "sql"),
    "how many test takers in total": fenced("SELECT SUM(numtsttakr) FROM satscores", "sql"),
    # wrong column: primary is rejected, fallback repairs it
    "names of schools with sat scores": fenced("SELECT nme FROM schools", "sql"),
    # permanently wrong: the ladder exhausts
    "which school is listed first": fenced("SELECT nope FROM schools", "sql"),
}

FALLBACK_FIXTURES = {
    "names of schools with sat scores": fenced(
        "SELECT sname FROM schools JOIN satscores ON schools.cdscode = satscores.cds", "sql"
    ),
    "which school is listed first": fenced("SELECT still_nope FROM schools", "sql"),
}


def build_fixture_engine(registry):
    return make_engine(registry, DECOMPOSER_FIXTURES, PRIMARY_FIXTURES, FALLBACK_FIXTURES)


def test_run_benchmark_routing_and_accuracy(registry, tmp_path):
    tasks = load_tasks(write_tasks(tmp_path / "tasks.json", FIXTURE_TASKS))
    engine = build_fixture_engine(registry)
    report = run_benchmark(tasks, engine, workers=1, trials=2, runtime_clock=constant_step_clock())
    assert report.n_tasks == 5
    assert report.ex == pytest.approx(0.8)
    assert report.local_fraction == pytest.approx(0.6)
    routes = [r.route for r in report.per_task]
    assert routes.count(TaskRoute.LOCAL_ONLY) == 3
    assert routes.count(TaskRoute.FALLBACK_USED) == 1
    assert routes.count(TaskRoute.FAILED) == 1
    failed = [r for r in report.per_task if r.route is TaskRoute.FAILED][0]
    assert failed.indicator == 0
    assert failed.predicted_sql is None


def test_run_benchmark_four_task_subset_ex(registry, tmp_path):
    # 3 correct + 1 failure -> EX 0.75, matching the hand-computed indicator sum
    tasks = load_tasks(
        write_tasks(tmp_path / "tasks.json", [FIXTURE_TASKS[0], FIXTURE_TASKS[1], FIXTURE_TASKS[2], FIXTURE_TASKS[4]])
    )
    engine = build_fixture_engine(registry)
    report = run_benchmark(tasks, engine, workers=1, trials=2, runtime_clock=constant_step_clock())
    assert report.ex == pytest.approx(0.75)
    assert sum(1 for r in report.per_task if r.route is TaskRoute.FAILED) == 1


def test_run_benchmark_workers_do_not_change_results(registry, tmp_path):
    tasks = load_tasks(write_tasks(tmp_path / "tasks.json", FIXTURE_TASKS))
    serial = run_benchmark(
        tasks, build_fixture_engine(registry), workers=1, trials=2,
        runtime_clock=constant_step_clock(),
    )
    parallel = run_benchmark(
        tasks, build_fixture_engine(registry), workers=4, trials=2,
        runtime_clock=constant_step_clock(),
    )
    assert serial.ex == parallel.ex
    assert serial.ves == parallel.ves
    assert serial.local_fraction == parallel.local_fraction
    assert serial.avg_cost_per_query == parallel.avg_cost_per_query
    serial_routes = [r.route for r in serial.per_task]
    parallel_routes = [r.route for r in parallel.per_task]
    assert serial_routes == parallel_routes


def test_run_benchmark_missing_db_rejected(registry, tmp_path):
    tasks = [BenchTask("0", "q", "nonexistent_db", "SELECT 1")]
    engine = build_fixture_engine(registry)
    with pytest.raises(ConfigurationError, match="nonexistent_db"):
        run_benchmark(tasks, engine, workers=1)


def test_run_benchmark_cost_decomposition(registry, tmp_path):
    # avg = lf * avg_local + (1 - lf) * avg_rest, with local cost exactly 0
    tasks = load_tasks(write_tasks(tmp_path / "tasks.json", FIXTURE_TASKS))
    engine = build_fixture_engine(registry)
    report = run_benchmark(tasks, engine, workers=1, trials=2, runtime_clock=constant_step_clock())
    local = [r for r in report.per_task if r.route is TaskRoute.LOCAL_ONLY]
    rest = [r for r in report.per_task if r.route is not TaskRoute.LOCAL_ONLY]
    assert all(r.cost_dollars == 0.0 for r in local)
    lf = report.local_fraction
    avg_rest = sum(r.cost_dollars for r in rest) / len(rest)
    assert report.avg_cost_per_query == pytest.approx((1 - lf) * avg_rest, abs=1e-12)
    assert report.avg_cost_per_query > 0  # the fallback routes are billed


def test_report_files_round_trip(registry, tmp_path):
    tasks = load_tasks(write_tasks(tmp_path / "tasks.json", FIXTURE_TASKS[:2]))
    engine = build_fixture_engine(registry)
    report = run_benchmark(
        tasks, engine, workers=1, trials=2, runtime_clock=constant_step_clock()
    )
    json_path = tmp_path / "report.json"
    csv_path = tmp_path / "report.csv"
    write_report_json(report, json_path)
    write_report_csv(report, csv_path)
    payload = json.loads(json_path.read_text())
    assert payload["ex"] == report.ex
    assert payload["metadata"]["row_comparison"] == "multiset"
    assert len(payload["per_task"]) == 2
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0].startswith("question_id,indicator,r_value,route,cost")
    assert len(lines) == 3
