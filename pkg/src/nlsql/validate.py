"""Four-stage SQL validation: value autocorrection, syntax and reference
checks, sandboxed execution, semantic checks.

Stages run in a fixed order and short-circuit on the first Fail; a Fail is
never an exception. The outcome is either Accepted (the corrected SQL plus
its execution result) or Rejected carrying a diagnostic bundle for the
fallback generator: every Fail message, every Warn message and the exact
SQL that was rejected.

Syntax checking is two-route: SQLite itself compiles the statement against
an in-memory mirror of the catalog (authoritative for grammar), while a
token-level scope resolver produces the per-reference "unknown column X in
Y" messages when compilation fails on a missing name.
"""

from __future__ import annotations

import sqlite3
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Union

from . import sqltext
from .generate import DiagnosticBundle
from .plan import DecompositionPlan
from .schema import EvidenceMap, SchemaCatalog, SchemaContext
from .sqltext import Token

Clock = Callable[[], float]


class StageName(Enum):
    VALUE_CHECK = "value_check"
    SYNTAX = "syntax"
    EXECUTION = "execution"
    SEMANTIC = "semantic"


class StageStatus(Enum):
    PASS = "pass"
    WARN = "warn"
    FAIL = "fail"


@dataclass(frozen=True)
class StageResult:
    stage: StageName
    status: StageStatus
    messages: tuple[str, ...] = ()


@dataclass(frozen=True)
class Correction:
    original_literal: str
    corrected_literal: str
    table: str
    column: str


@dataclass(frozen=True)
class ValidationReport:
    stage_results: tuple[StageResult, ...]
    corrections: tuple[Correction, ...] = ()


@dataclass(frozen=True)
class ExecutionOutcome:
    rows: tuple[tuple, ...]
    column_names: tuple[str, ...]
    runtime_s: float
    truncated: bool = False


@dataclass(frozen=True)
class SandboxLimits:
    timeout_s: float = 30.0
    max_rows: int = 10_000


@dataclass(frozen=True)
class Accepted:
    sql_final: str
    outcome: ExecutionOutcome
    report: ValidationReport


@dataclass(frozen=True)
class Rejected:
    bundle: DiagnosticBundle
    report: ValidationReport


ValidationDecision = Union[Accepted, Rejected]


# ---------------------------------------------------------------------------
# stage 1: evidence-based value autocorrection


def autocorrect_values(sql: str, evidence: EvidenceMap) -> tuple[str, tuple[Correction, ...]]:
    """Replace string literals in equality/IN predicates that match an
    evidence db_value up to case with the exact stored value.

    Only literals adjacent to =, ==, !=, <> or inside an IN list are
    touched; LIKE patterns are never rewritten. Unlexable SQL is returned
    untouched. Idempotent: a corrected literal equals its db_value exactly,
    so a second pass finds nothing to change.
    """
    if not evidence.entries:
        return sql, ()
    try:
        tokens = sqltext.tokenize(sql)
    except sqltext.SqlLexError:
        return sql, ()

    replacements: list[tuple[int, int, str]] = []  # (pos, end, new_text)
    corrections: list[Correction] = []
    for idx, tok in enumerate(tokens):
        if tok.kind != "string":
            continue
        column = _predicate_column(tokens, idx)
        if column is None:
            continue
        col_name, table_name = column
        for entry in evidence.for_column(col_name, table_name):
            if tok.value != entry.db_value and tok.value.lower() == entry.db_value.lower():
                replacements.append((tok.pos, tok.end, sqltext.quote_string_literal(entry.db_value)))
                corrections.append(
                    Correction(tok.value, entry.db_value, entry.table, entry.column)
                )
                break

    if not replacements:
        return sql, ()
    out = []
    cursor = 0
    for pos, end, new_text in sorted(replacements):
        out.append(sql[cursor:pos])
        out.append(new_text)
        cursor = end
    out.append(sql[cursor:])
    return "".join(out), tuple(corrections)


_EQUALITY_OPS = {"=", "==", "!=", "<>"}


def _predicate_column(tokens: list[Token], literal_idx: int) -> Optional[tuple[str, Optional[str]]]:
    """Column (and table qualifier, if any) compared against the string
    literal at literal_idx, or None when the literal is not in an equality
    or IN predicate."""
    # col = 'lit'  /  tbl.col = 'lit'
    prev = tokens[literal_idx - 1] if literal_idx >= 1 else None
    if prev is not None and prev.kind == "op" and prev.value in _EQUALITY_OPS:
        return _column_ref_ending_at(tokens, literal_idx - 2)
    # 'lit' = col
    nxt = tokens[literal_idx + 1] if literal_idx + 1 < len(tokens) else None
    if nxt is not None and nxt.kind == "op" and nxt.value in _EQUALITY_OPS:
        ref = _column_ref_starting_at(tokens, literal_idx + 2)
        if ref is not None:
            return ref
    # col IN ('a', 'lit', ...) including NOT IN
    depth_open = _enclosing_open_paren(tokens, literal_idx)
    if depth_open is not None:
        before = depth_open - 1
        if before >= 0 and tokens[before].kind == "keyword" and tokens[before].value == "IN":
            anchor = before - 1
            if anchor >= 0 and tokens[anchor].kind == "keyword" and tokens[anchor].value == "NOT":
                anchor -= 1
            return _column_ref_ending_at(tokens, anchor)
    return None


def _column_ref_ending_at(tokens: list[Token], idx: int) -> Optional[tuple[str, Optional[str]]]:
    if idx < 0 or tokens[idx].kind != "ident":
        return None
    col = tokens[idx].value
    if idx >= 2 and tokens[idx - 1].value == "." and tokens[idx - 2].kind == "ident":
        return col, tokens[idx - 2].value
    return col, None


def _column_ref_starting_at(tokens: list[Token], idx: int) -> Optional[tuple[str, Optional[str]]]:
    if idx >= len(tokens) or tokens[idx].kind != "ident":
        return None
    first = tokens[idx].value
    if (
        idx + 2 < len(tokens)
        and tokens[idx + 1].value == "."
        and tokens[idx + 2].kind == "ident"
    ):
        return tokens[idx + 2].value, first
    return first, None


def _enclosing_open_paren(tokens: list[Token], idx: int) -> Optional[int]:
    depth = 0
    for j in range(idx - 1, -1, -1):
        tok = tokens[j]
        if tok.text == ")":
            depth += 1
        elif tok.text == "(":
            if depth == 0:
                return j
            depth -= 1
    return None


# ---------------------------------------------------------------------------
# stage 2: syntax and reference validation


def validate_syntax(sql: str, catalog: SchemaCatalog) -> StageResult:
    """Compile the statement against a schema mirror and resolve references.

    Fail with the parser message on malformed SQL, Fail listing each unknown
    table/column (aliases and FROM/JOIN scope resolved), Warn on a JOIN with
    no ON/USING clause, Pass otherwise.
    """
    stripped = sql.strip()
    if not stripped:
        return StageResult(StageName.SYNTAX, StageStatus.FAIL, ("parse error: empty statement",))
    try:
        sqltext.tokenize(stripped)
    except sqltext.SqlLexError as exc:
        return StageResult(StageName.SYNTAX, StageStatus.FAIL, (f"parse error: {exc}",))
    if sqltext.paren_balance(stripped) != 0:
        return StageResult(
            StageName.SYNTAX, StageStatus.FAIL, ("parse error: unbalanced parentheses",)
        )

    compile_error = _compile_against_mirror(stripped, catalog)
    if compile_error is not None:
        lowered = compile_error.lower()
        if "syntax error" in lowered or "incomplete input" in lowered:
            return StageResult(StageName.SYNTAX, StageStatus.FAIL, (f"parse error: {compile_error}",))
        problems = _reference_problems(stripped, catalog)
        if problems:
            return StageResult(StageName.SYNTAX, StageStatus.FAIL, tuple(problems))
        return StageResult(StageName.SYNTAX, StageStatus.FAIL, (compile_error,))

    warnings = _join_without_on_warnings(stripped)
    if warnings:
        return StageResult(StageName.SYNTAX, StageStatus.WARN, tuple(warnings))
    return StageResult(StageName.SYNTAX, StageStatus.PASS)


def _mirror_ddl(catalog: SchemaCatalog) -> list[str]:
    ddl = []
    for table in catalog.tables:
        cols = ", ".join(
            f'"{c.name}" {c.declared_type}'.strip() for c in table.columns
        )
        ddl.append(f'CREATE TABLE "{table.name}" ({cols})')
    return ddl


def _compile_against_mirror(sql: str, catalog: SchemaCatalog) -> Optional[str]:
    """Prepare (EXPLAIN) the statement on an empty in-memory copy of the
    schema. Returns SQLite's error message, or None when it compiles."""
    conn = sqlite3.connect(":memory:")
    try:
        for stmt in _mirror_ddl(catalog):
            conn.execute(stmt)
        probe = sql if sql.upper().startswith("EXPLAIN") else "EXPLAIN " + sql
        try:
            conn.execute(probe)
        except (sqlite3.Error, sqlite3.Warning) as exc:
            return str(exc)
        except ValueError as exc:
            # e.g. embedded null characters, surrogates the driver rejects
            return f"syntax error: {exc}"
        return None
    finally:
        conn.close()


_SOURCE_STOP = frozenset(
    {"ON", "USING", "WHERE", "GROUP", "ORDER", "LIMIT", "HAVING", "UNION",
     "EXCEPT", "INTERSECT", "JOIN", "LEFT", "RIGHT", "FULL", "INNER", "OUTER",
     "CROSS", "NATURAL", "SET", "WINDOW"}
)


def _reference_problems(sql: str, catalog: SchemaCatalog) -> list[str]:
    """Token-level table/column resolution, listing each unknown reference.

    Scopes are merged across subqueries: every FROM/JOIN source in the
    statement contributes to one alias map. That is deliberately loose; this
    scan runs only after SQLite's own compile has already rejected the
    statement for a missing name, so its job is producing precise messages,
    not deciding validity.
    """
    tokens = sqltext.tokenize(sql)
    aliases: dict[str, str] = {}  # alias/table (lower) -> catalog table or "" for derived
    derived: set[str] = set()
    problems: list[str] = []
    seen: set[str] = set()

    # CTE and derived-table names: ident AS (
    for i, tok in enumerate(tokens):
        if (
            tok.kind == "ident"
            and i + 2 < len(tokens)
            and tokens[i + 1].kind == "keyword"
            and tokens[i + 1].value == "AS"
            and tokens[i + 2].text == "("
        ):
            derived.add(tok.value.lower())

    # FROM/JOIN sources
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if tok.kind == "keyword" and tok.value in ("FROM", "JOIN"):
            i = _scan_source(tokens, i + 1, catalog, aliases, derived, problems, seen)
            continue
        i += 1

    in_scope_tables = sorted({t for t in aliases.values() if t})

    # qualified references: qualifier.column
    for i, tok in enumerate(tokens):
        if tok.kind != "ident":
            continue
        if i + 2 < len(tokens) and tokens[i + 1].value == "." and tokens[i + 2].kind == "ident":
            qualifier = tok.value.lower()
            column = tokens[i + 2].value
            if qualifier in derived:
                continue
            resolved = aliases.get(qualifier)
            if resolved is None:
                if catalog.has_table(qualifier):
                    resolved = qualifier
                else:
                    _note(problems, seen, f"unknown table or alias {tok.value!r}")
                    continue
            if resolved and not catalog.has_column(resolved, column):
                _note(problems, seen, f"unknown column {column} in {resolved}")

    # unqualified identifiers
    known_columns = {
        c.lower() for t in in_scope_tables for c in catalog.column_names(t)
    }
    output_aliases = {
        tokens[i + 1].value.lower()
        for i, tok in enumerate(tokens[:-1])
        if tok.kind == "keyword" and tok.value == "AS" and tokens[i + 1].kind == "ident"
    }
    for i, tok in enumerate(tokens):
        if tok.kind != "ident":
            continue
        nxt = tokens[i + 1] if i + 1 < len(tokens) else None
        prev = tokens[i - 1] if i >= 1 else None
        if nxt is not None and (nxt.text == "(" or nxt.value == "."):
            continue  # function call or qualifier
        if prev is not None and prev.value == ".":
            continue  # already handled as qualified
        if prev is not None and prev.kind == "keyword" and prev.value in ("AS", "FROM", "JOIN"):
            continue
        name = tok.value.lower()
        if name in aliases or name in derived or name in output_aliases:
            continue
        if catalog.has_table(name):
            continue
        if name not in known_columns:
            owners = catalog.all_column_owners(tok.value)
            if owners:
                continue  # column of a table outside the merged scope; let it be
            if len(in_scope_tables) == 1:
                _note(problems, seen, f"unknown column {tok.value} in {in_scope_tables[0]}")
            else:
                _note(problems, seen, f"unknown column {tok.value}")
    return problems


def _scan_source(
    tokens: list[Token],
    i: int,
    catalog: SchemaCatalog,
    aliases: dict[str, str],
    derived: set[str],
    problems: list[str],
    seen: set[str],
) -> int:
    """Parse one FROM/JOIN source list starting at token i; returns the index
    to resume scanning from."""
    while i < len(tokens):
        tok = tokens[i]
        if tok.text == "(":
            # derived table: skip to the matching close, grab optional alias
            depth = 1
            i += 1
            while i < len(tokens) and depth:
                if tokens[i].text == "(":
                    depth += 1
                elif tokens[i].text == ")":
                    depth -= 1
                i += 1
            i = _maybe_alias(tokens, i, "", aliases)
        elif tok.kind == "ident":
            table = tok.value
            i += 1
            if i + 1 < len(tokens) and tokens[i].value == "." and tokens[i + 1].kind == "ident":
                table = tokens[i + 1].value  # schema-qualified; keep the table part
                i += 2
            lowered = table.lower()
            if lowered in derived:
                aliases.setdefault(lowered, "")
            elif catalog.has_table(lowered):
                aliases.setdefault(lowered, lowered)
            else:
                _note(problems, seen, f"unknown table {table}")
                aliases.setdefault(lowered, "")
            i = _maybe_alias(tokens, i, lowered if catalog.has_table(lowered) else "", aliases)
        else:
            return i
        # comma-separated source list continues, anything else ends the scan
        if i < len(tokens) and tokens[i].kind == "punct" and tokens[i].value == ",":
            i += 1
            continue
        return i
    return i


def _maybe_alias(tokens: list[Token], i: int, table: str, aliases: dict[str, str]) -> int:
    if i < len(tokens) and tokens[i].kind == "keyword" and tokens[i].value == "AS":
        i += 1
    if i < len(tokens) and tokens[i].kind == "ident":
        aliases[tokens[i].value.lower()] = table
        return i + 1
    return i


def _note(problems: list[str], seen: set[str], message: str) -> None:
    if message not in seen:
        seen.add(message)
        problems.append(message)


def _join_without_on_warnings(sql: str) -> list[str]:
    tokens = sqltext.tokenize(sql)
    warnings = []
    for i, tok in enumerate(tokens):
        if tok.kind != "keyword" or tok.value != "JOIN":
            continue
        prev = tokens[i - 1] if i >= 1 else None
        if prev is not None and prev.kind == "keyword" and prev.value == "NATURAL":
            continue  # NATURAL JOIN carries an implicit condition
        if not _join_has_condition(tokens, i):
            warnings.append("join without ON/USING clause")
    return warnings


def _join_has_condition(tokens: list[Token], join_idx: int) -> bool:
    depth = tokens[join_idx].depth
    for tok in tokens[join_idx + 1 :]:
        if tok.depth < depth:
            return False
        if tok.depth != depth:
            continue
        if tok.kind == "keyword":
            if tok.value in ("ON", "USING"):
                return True
            if tok.value in ("JOIN", "WHERE", "GROUP", "ORDER", "LIMIT", "UNION",
                             "EXCEPT", "INTERSECT", "HAVING", "WINDOW"):
                return False
    return False


# ---------------------------------------------------------------------------
# stage 3: sandboxed execution


_PROGRESS_STEP = 2000  # VM instructions between timeout checks


def execute_sandboxed(
    sql: str,
    db_path: Path | str,
    limits: SandboxLimits = SandboxLimits(),
    clock: Clock = time.perf_counter,
) -> Union[ExecutionOutcome, StageResult]:
    """Run one statement against the database file, read-only, inside a
    transaction that is always rolled back.

    Rows are capped at limits.max_rows (the outcome is flagged truncated);
    execution past limits.timeout_s is interrupted. Runtime is measured
    around execution only, which for SQLite means statement step plus fetch.
    """
    uri = f"file:{Path(db_path)}?mode=ro"
    try:
        conn = sqlite3.connect(uri, uri=True, isolation_level=None, timeout=limits.timeout_s)
    except sqlite3.Error as exc:
        return StageResult(StageName.EXECUTION, StageStatus.FAIL, (str(exc),))
    deadline = clock() + limits.timeout_s
    timed_out = False

    def _progress():
        nonlocal timed_out
        if clock() > deadline:
            timed_out = True
            return 1
        return 0

    try:
        conn.execute("PRAGMA query_only=ON")
        conn.set_progress_handler(_progress, _PROGRESS_STEP)
        conn.execute("BEGIN")
        try:
            started = clock()
            cursor = conn.execute(sql)
            fetched = cursor.fetchmany(limits.max_rows + 1)
            runtime = clock() - started
        except (sqlite3.Error, sqlite3.Warning, ValueError) as exc:
            if timed_out or "interrupted" in str(exc).lower():
                return StageResult(
                    StageName.EXECUTION,
                    StageStatus.FAIL,
                    (f"timeout after {limits.timeout_s}s",),
                )
            return StageResult(StageName.EXECUTION, StageStatus.FAIL, (str(exc),))
        columns = tuple(d[0] for d in cursor.description) if cursor.description else ()
        truncated = len(fetched) > limits.max_rows
        rows = tuple(tuple(r) for r in fetched[: limits.max_rows])
        return ExecutionOutcome(rows, columns, runtime, truncated)
    finally:
        try:
            conn.rollback()
        except sqlite3.Error:
            pass
        conn.close()


# ---------------------------------------------------------------------------
# stage 4: semantic validation


def validate_semantics(
    outcome: ExecutionOutcome, plan: DecompositionPlan, sql: str
) -> StageResult:
    """Check the result shape against the plan's output specification.

    Arity mismatch is a Fail; empty results and aggregate/no-aggregate
    disagreements between plan and SQL are Warns.
    """
    expected = len(plan.output_spec.columns)
    actual = len(outcome.column_names)
    if actual != expected:
        return StageResult(
            StageName.SEMANTIC,
            StageStatus.FAIL,
            (f"result has {actual} column(s), plan expects {expected}",),
        )
    warnings = []
    if not outcome.rows:
        warnings.append("empty result")
    try:
        sql_aggregates = sqltext.contains_aggregate(sql)
    except sqltext.SqlLexError:
        sql_aggregates = False
    if plan.expects_aggregate() != sql_aggregates:
        warnings.append("aggregation mismatch")
    if warnings:
        return StageResult(StageName.SEMANTIC, StageStatus.WARN, tuple(warnings))
    return StageResult(StageName.SEMANTIC, StageStatus.PASS)


# ---------------------------------------------------------------------------
# full pipeline


def validate_full(
    sql: str,
    context: SchemaContext,
    plan: DecompositionPlan,
    db_path: Path | str,
    limits: SandboxLimits = SandboxLimits(),
    strict_semantic: bool = False,
    clock: Clock = time.perf_counter,
) -> ValidationDecision:
    """Run the four stages in order on the autocorrected SQL.

    Rejected iff any stage Fails (with strict_semantic, semantic Warns are
    promoted to Fails). Never raises on arbitrary input text.
    """
    corrected, corrections = autocorrect_values(sql, context.evidence)
    stage_results = [
        StageResult(
            StageName.VALUE_CHECK,
            StageStatus.PASS,
            tuple(
                f"corrected {c.original_literal!r} -> {c.corrected_literal!r} "
                f"({c.table}.{c.column})"
                for c in corrections
            ),
        )
    ]

    syntax = validate_syntax(corrected, context.catalog)
    stage_results.append(syntax)
    if syntax.status is StageStatus.FAIL:
        return _rejected(corrected, stage_results, corrections)

    executed = execute_sandboxed(corrected, db_path, limits, clock)
    if isinstance(executed, StageResult):
        stage_results.append(executed)
        return _rejected(corrected, stage_results, corrections)
    stage_results.append(StageResult(StageName.EXECUTION, StageStatus.PASS))

    semantic = validate_semantics(executed, plan, corrected)
    if strict_semantic and semantic.status is StageStatus.WARN:
        semantic = StageResult(StageName.SEMANTIC, StageStatus.FAIL, semantic.messages)
    stage_results.append(semantic)
    if semantic.status is StageStatus.FAIL:
        return _rejected(corrected, stage_results, corrections)

    report = ValidationReport(tuple(stage_results), corrections)
    return Accepted(corrected, executed, report)


def _rejected(
    sql: str, stage_results: list[StageResult], corrections: tuple[Correction, ...]
) -> Rejected:
    errors = []
    warnings = []
    for result in stage_results:
        if result.status is StageStatus.FAIL:
            errors.extend(result.messages)
        elif result.status is StageStatus.WARN:
            warnings.extend(result.messages)
    bundle = DiagnosticBundle(
        execution_errors=tuple(errors),
        validation_warnings=tuple(warnings),
        failed_sql=sql,
    )
    return Rejected(bundle, ValidationReport(tuple(stage_results), corrections))
