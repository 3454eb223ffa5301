"""Four-stage validation: value autocorrection, syntax/reference checks,
sandboxed execution and semantic checks."""

from __future__ import annotations

import hashlib

import pytest
from hypothesis import given, strategies as st

from nlsql.plan import parse_plan
from nlsql.schema import EvidenceEntry, EvidenceMap, build_context
from nlsql.state import Question
from nlsql.validate import (
    Accepted,
    ExecutionOutcome,
    Rejected,
    SandboxLimits,
    StageName,
    StageStatus,
    StageResult,
    autocorrect_values,
    execute_sandboxed,
    validate_full,
    validate_semantics,
    validate_syntax,
)

from conftest import COUNT_PLAN, DB_ID, NAMES_PLAN

EVIDENCE = EvidenceMap(
    (
        EvidenceEntry("East Bohemia", "district", "region", "east Bohemia"),
        EvidenceEntry("charter schools", "schools", "charter", "Y"),
    )
)


# ---------------------------------------------------------------------------
# stage 1: autocorrection


def test_autocorrect_east_bohemia_case():
    sql = "SELECT sname FROM schools JOIN district ON schools.district_id = district.id WHERE district.region = 'East Bohemia'"
    corrected, corrections = autocorrect_values(sql, EVIDENCE)
    assert "'east Bohemia'" in corrected
    assert "'East Bohemia'" not in corrected
    assert len(corrections) == 1
    assert corrections[0].original_literal == "East Bohemia"
    assert corrections[0].corrected_literal == "east Bohemia"
    assert corrections[0].column == "region"


def test_autocorrect_no_literals_is_identity():
    sql = "SELECT COUNT(*) FROM schools"
    corrected, corrections = autocorrect_values(sql, EVIDENCE)
    assert corrected == sql
    assert corrections == ()


def test_autocorrect_exact_literal_is_fixpoint():
    sql = "SELECT * FROM district WHERE region = 'east Bohemia'"
    corrected, corrections = autocorrect_values(sql, EVIDENCE)
    assert corrected == sql
    assert corrections == ()


def test_autocorrect_is_idempotent():
    sql = "SELECT * FROM district WHERE region = 'EAST BOHEMIA'"
    once, corrections = autocorrect_values(sql, EVIDENCE)
    twice, again = autocorrect_values(once, EVIDENCE)
    assert len(corrections) == 1
    assert twice == once
    assert again == ()


def test_autocorrect_reversed_comparison():
    sql = "SELECT * FROM district WHERE 'East Bohemia' = region"
    corrected, corrections = autocorrect_values(sql, EVIDENCE)
    assert "'east Bohemia'" in corrected
    assert len(corrections) == 1


def test_autocorrect_in_list():
    sql = "SELECT * FROM district WHERE region IN ('East Bohemia', 'nowhere')"
    corrected, corrections = autocorrect_values(sql, EVIDENCE)
    assert "'east Bohemia'" in corrected
    assert "'nowhere'" in corrected
    assert len(corrections) == 1


def test_autocorrect_never_touches_like():
    sql = "SELECT * FROM district WHERE region LIKE 'East Bohemia'"
    corrected, corrections = autocorrect_values(sql, EVIDENCE)
    assert corrected == sql
    assert corrections == ()


def test_autocorrect_respects_table_qualifier():
    # schools.region does not exist in evidence; only district.region does
    sql = "SELECT * FROM schools WHERE schools.region = 'East Bohemia'"
    corrected, corrections = autocorrect_values(sql, EVIDENCE)
    assert corrected == sql
    assert corrections == ()


def test_autocorrect_unlexable_sql_untouched():
    sql = "SELECT 'unterminated"
    corrected, corrections = autocorrect_values(sql, EVIDENCE)
    assert corrected == sql and corrections == ()


@given(st.text(max_size=80))
def test_autocorrect_never_raises(sql):
    corrected, _ = autocorrect_values(sql, EVIDENCE)
    assert isinstance(corrected, str)


# ---------------------------------------------------------------------------
# stage 2: syntax


def test_syntax_malformed_sql_fails_with_parse_error(catalog):
    result = validate_syntax("SELEC * FROM t", catalog)
    assert result.status is StageStatus.FAIL
    assert "parse error" in result.messages[0]


def test_syntax_unknown_column_named(catalog):
    result = validate_syntax("SELECT nme FROM schools", catalog)
    assert result.status is StageStatus.FAIL
    assert any("unknown column" in m and "nme" in m and "schools" in m for m in result.messages)


def test_syntax_unknown_table_named(catalog):
    result = validate_syntax("SELECT x FROM ghosts", catalog)
    assert result.status is StageStatus.FAIL
    assert any("unknown table" in m and "ghosts" in m for m in result.messages)


def test_syntax_alias_join_passes(catalog):
    sql = "SELECT s.sname FROM schools s JOIN satscores c ON s.cdscode = c.cds"
    result = validate_syntax(sql, catalog)
    assert result.status is StageStatus.PASS


def test_syntax_alias_resolution_reports_aliased_table(catalog):
    sql = "SELECT s.nme FROM schools s JOIN satscores c ON s.cdscode = c.cds"
    result = validate_syntax(sql, catalog)
    assert result.status is StageStatus.FAIL
    assert any("nme" in m and "schools" in m for m in result.messages)


def test_syntax_lists_multiple_unknowns(catalog):
    sql = "SELECT nme, zip FROM schools"
    result = validate_syntax(sql, catalog)
    assert result.status is StageStatus.FAIL
    joined = " | ".join(result.messages)
    assert "nme" in joined and "zip" in joined


def test_syntax_join_without_on_warns(catalog):
    result = validate_syntax("SELECT * FROM schools JOIN satscores", catalog)
    assert result.status is StageStatus.WARN
    assert "ON/USING" in result.messages[0]


def test_syntax_cte_and_subquery_pass(catalog):
    sql = (
        "WITH rates AS (SELECT cds, CAST(numge1500 AS REAL)/numtsttakr AS rate FROM satscores) "
        "SELECT sname FROM schools JOIN rates ON schools.cdscode = rates.cds "
        "WHERE rate > (SELECT AVG(rate) FROM rates)"
    )
    assert validate_syntax(sql, catalog).status is StageStatus.PASS


def test_syntax_accepts_quoted_identifiers(catalog):
    assert validate_syntax('SELECT "sname" FROM `schools`', catalog).status is StageStatus.PASS


def test_syntax_insert_compiles(catalog):
    # writes are a sandbox problem, not a grammar problem
    result = validate_syntax("INSERT INTO schools VALUES ('x','X','N',1)", catalog)
    assert result.status in (StageStatus.PASS, StageStatus.WARN)


# ---------------------------------------------------------------------------
# stage 3: sandbox


def test_sandbox_select_one(db_path):
    outcome = execute_sandboxed("SELECT 1", db_path)
    assert isinstance(outcome, ExecutionOutcome)
    assert outcome.rows == ((1,),)
    assert outcome.runtime_s > 0
    assert not outcome.truncated


def test_sandbox_rejects_writes(db_path):
    result = execute_sandboxed("INSERT INTO schools VALUES ('x','X','N',1)", db_path)
    assert isinstance(result, StageResult)
    assert result.status is StageStatus.FAIL


def test_sandbox_runtime_error_reported(db_path):
    result = execute_sandboxed("SELECT 1/0 FROM schools WHERE zap > 1", db_path)
    assert isinstance(result, StageResult)
    assert result.status is StageStatus.FAIL


def test_sandbox_timeout_on_pathological_join(db_path):
    sql = "SELECT count(*) FROM " + ", ".join(f"schools s{i}" for i in range(10))
    limits = SandboxLimits(timeout_s=0.1, max_rows=100)
    result = execute_sandboxed(sql, db_path, limits)
    assert isinstance(result, StageResult)
    assert result.status is StageStatus.FAIL
    assert "timeout" in result.messages[0]


def test_sandbox_row_cap_flags_truncation(db_path):
    limits = SandboxLimits(timeout_s=5.0, max_rows=3)
    outcome = execute_sandboxed("SELECT * FROM schools", db_path, limits)
    assert isinstance(outcome, ExecutionOutcome)
    assert outcome.truncated
    assert len(outcome.rows) == 3


def test_sandbox_leaves_file_byte_identical(db_path):
    before = hashlib.sha256(db_path.read_bytes()).hexdigest()
    execute_sandboxed("SELECT * FROM schools", db_path)
    execute_sandboxed("INSERT INTO schools VALUES ('z','Z','N',2)", db_path)
    execute_sandboxed("DROP TABLE schools", db_path)
    after = hashlib.sha256(db_path.read_bytes()).hexdigest()
    assert before == after


def test_sandbox_multiple_statements_fail(db_path):
    result = execute_sandboxed("SELECT 1; DROP TABLE schools", db_path)
    assert isinstance(result, StageResult)
    assert result.status is StageStatus.FAIL


# ---------------------------------------------------------------------------
# stage 4: semantics


def outcome_with(rows, columns):
    return ExecutionOutcome(tuple(rows), tuple(columns), 0.001)


def test_semantics_matching_shape_passes():
    plan = parse_plan(NAMES_PLAN)
    result = validate_semantics(
        outcome_with([("a",), ("b",)], ["sname"]), plan, "SELECT sname FROM schools"
    )
    assert result.status is StageStatus.PASS


def test_semantics_arity_mismatch_fails():
    plan = parse_plan(NAMES_PLAN)
    result = validate_semantics(
        outcome_with([("a", "b")], ["sname", "charter"]),
        plan,
        "SELECT sname, charter FROM schools",
    )
    assert result.status is StageStatus.FAIL


def test_semantics_empty_result_warns():
    plan = parse_plan(NAMES_PLAN)
    result = validate_semantics(outcome_with([], ["sname"]), plan, "SELECT sname FROM schools")
    assert result.status is StageStatus.WARN
    assert "empty result" in result.messages


def test_semantics_aggregation_mismatch_warns_both_ways():
    count_plan = parse_plan(COUNT_PLAN)
    no_agg = validate_semantics(
        outcome_with([(5,)], ["n"]), count_plan, "SELECT district_id FROM schools"
    )
    assert no_agg.status is StageStatus.WARN
    assert "aggregation mismatch" in no_agg.messages
    names_plan = parse_plan(NAMES_PLAN)
    has_agg = validate_semantics(
        outcome_with([(5,)], ["n"]), names_plan, "SELECT COUNT(*) FROM schools"
    )
    assert has_agg.status is StageStatus.WARN
    assert "aggregation mismatch" in has_agg.messages


# ---------------------------------------------------------------------------
# validate_full


@pytest.fixture
def context(catalog, evidence):
    return build_context(catalog, [], evidence, Question("q", DB_ID))


def test_full_gold_query_accepted(context, db_path):
    plan = parse_plan(NAMES_PLAN)
    decision = validate_full("SELECT sname FROM schools", context, plan, db_path)
    assert isinstance(decision, Accepted)
    assert len(decision.outcome.rows) == 5
    statuses = [r.status for r in decision.report.stage_results]
    assert all(s in (StageStatus.PASS, StageStatus.WARN) for s in statuses)
    assert len(decision.report.stage_results) == 4


def test_full_unknown_column_rejected_at_syntax(context, db_path):
    plan = parse_plan(NAMES_PLAN)
    decision = validate_full("SELECT nme FROM schools", context, plan, db_path)
    assert isinstance(decision, Rejected)
    assert any("unknown column" in m for m in decision.bundle.execution_errors)
    # short-circuit: value check + syntax only
    assert len(decision.report.stage_results) == 2
    assert decision.bundle.failed_sql == "SELECT nme FROM schools"


def test_full_wrong_case_literal_corrected_and_executes(context, db_path):
    plan = parse_plan(NAMES_PLAN)
    sql = (
        "SELECT sname FROM schools JOIN district ON schools.district_id = district.id "
        "WHERE district.region = 'East Bohemia'"
    )
    decision = validate_full(sql, context, plan, db_path)
    assert isinstance(decision, Accepted)
    assert len(decision.report.corrections) == 1
    assert "'east Bohemia'" in decision.sql_final
    assert len(decision.outcome.rows) == 3  # district 1 schools


def test_full_execution_failure_stops_at_three_stages(context, db_path):
    plan = parse_plan(COUNT_PLAN)
    decision = validate_full(
        "INSERT INTO schools VALUES ('x','X','N',1)", context, plan, db_path
    )
    assert isinstance(decision, Rejected)
    assert len(decision.report.stage_results) == 3
    assert decision.report.stage_results[2].stage is StageName.EXECUTION


def test_full_semantic_warns_do_not_reject_by_default(context, db_path):
    plan = parse_plan(NAMES_PLAN)
    decision = validate_full(
        "SELECT sname FROM schools WHERE charter = 'nope'", context, plan, db_path
    )
    assert isinstance(decision, Accepted)
    semantic = decision.report.stage_results[-1]
    assert semantic.status is StageStatus.WARN
    assert "empty result" in semantic.messages


def test_full_strict_semantic_promotes_warns(context, db_path):
    plan = parse_plan(NAMES_PLAN)
    decision = validate_full(
        "SELECT sname FROM schools WHERE charter = 'nope'",
        context,
        plan,
        db_path,
        strict_semantic=True,
    )
    assert isinstance(decision, Rejected)
    assert "empty result" in decision.bundle.execution_errors


def test_full_collects_warnings_into_bundle(context, db_path):
    plan = parse_plan(NAMES_PLAN)
    # join without ON warns at syntax, then execution passes, arity fails
    decision = validate_full(
        "SELECT s.sname, c.cds FROM schools s JOIN satscores c", context, plan, db_path
    )
    assert isinstance(decision, Rejected)
    assert any("ON/USING" in w for w in decision.bundle.validation_warnings)


@given(sql=st.text(max_size=60))
def test_full_never_raises_on_arbitrary_text(context_session, sql):
    context, db_path, plan = context_session
    decision = validate_full(sql, context, plan, db_path, SandboxLimits(timeout_s=2.0))
    assert isinstance(decision, (Accepted, Rejected))


@pytest.fixture(scope="session")
def context_session(tmp_path_factory):
    from conftest import build_schools_db
    from nlsql.schema import introspect_schema

    db_dir = tmp_path_factory.mktemp("dbs")
    path = db_dir / "x.sqlite"
    build_schools_db(path)
    catalog = introspect_schema(path)
    context = build_context(catalog, [], EVIDENCE, Question("q", DB_ID))
    return context, path, parse_plan(NAMES_PLAN)
