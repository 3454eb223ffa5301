"""Question decomposition into a structured plan.

The decomposition backend is prompted to answer with a line-oriented plan:
four sections (ENTITIES, CONDITIONS, STEPS, OUTPUT), one record per line,
tab-separated fields. Line-oriented output survives small-model formatting
drift far better than nested object syntax; the parser is strict about the
invariants and reports violations with field paths so a single re-prompt
can show the model its mistake.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

from . import prompts, sqltext
from .errors import PlanParseError, TransportError
from .gateway import BackendSpec, Completion, GenerationParams, Role, complete
from .schema import SchemaCatalog, SchemaContext, catalog_summary
from .state import Question

logger = logging.getLogger(__name__)

SECTION_NAMES = ("ENTITIES", "CONDITIONS", "STEPS", "OUTPUT")

_SUBQUERY_FLAGS = {"subquery": True, "yes": True, "true": True, "1": True}
_SIMPLE_FLAGS = {"simple": False, "no": False, "false": False, "0": False}


@dataclass(frozen=True)
class EntityBinding:
    nl_phrase: str
    binding: str  # "table.column", "table", or a computed expression
    note: str = ""


@dataclass(frozen=True)
class Condition:
    nl_phrase: str
    predicate_sketch: str
    requires_subquery: bool


@dataclass(frozen=True)
class PlanStep:
    step_id: str
    description: str
    depends_on: tuple[str, ...] = ()


@dataclass(frozen=True)
class OutputSpec:
    columns: tuple[str, ...]
    ordering: Optional[str] = None
    limit: Optional[int] = None


@dataclass(frozen=True)
class DecompositionPlan:
    entities: tuple[EntityBinding, ...]
    conditions: tuple[Condition, ...]
    steps: tuple[PlanStep, ...]
    output_spec: OutputSpec

    def expects_aggregate(self) -> bool:
        return any(_has_aggregate_call(col) for col in self.output_spec.columns)


def _has_aggregate_call(expression: str) -> bool:
    upper = expression.upper()
    return any(f"{fn}(" in upper.replace(" (", "(") for fn in sqltext.AGGREGATE_FUNCTIONS)


# ---------------------------------------------------------------------------
# wire format


def parse_plan(raw: str) -> DecompositionPlan:
    """Strict parse of the plan wire format; all structural invariants are
    checked here and violations carry the offending field path."""
    body = _strip_fence(raw)
    sections = _split_sections(body, raw)

    entities = []
    for i, fields in enumerate(_records(sections["ENTITIES"])):
        if len(fields) < 2:
            raise PlanParseError(
                f"entity record needs phrase and binding, got {len(fields)} field(s)",
                raw_text=raw,
                field_path=f"entities[{i}]",
            )
        note = fields[2] if len(fields) > 2 else ""
        entities.append(EntityBinding(fields[0], fields[1], note))

    conditions = []
    for i, fields in enumerate(_records(sections["CONDITIONS"])):
        if len(fields) < 3:
            raise PlanParseError(
                "condition record needs phrase, predicate and subquery flag",
                raw_text=raw,
                field_path=f"conditions[{i}]",
            )
        flag = fields[2].strip().lower()
        if flag in _SUBQUERY_FLAGS:
            requires = True
        elif flag in _SIMPLE_FLAGS:
            requires = False
        else:
            raise PlanParseError(
                f"condition flag must be subquery/simple, got {fields[2]!r}",
                raw_text=raw,
                field_path=f"conditions[{i}].requires_subquery",
            )
        conditions.append(Condition(fields[0], fields[1], requires))

    steps = []
    for i, fields in enumerate(_records(sections["STEPS"])):
        if len(fields) < 2:
            raise PlanParseError(
                "step record needs id and description",
                raw_text=raw,
                field_path=f"steps[{i}]",
            )
        deps_field = fields[2] if len(fields) > 2 else ""
        deps = tuple(
            d.strip() for d in deps_field.split(",") if d.strip() and d.strip() != "-"
        )
        steps.append(PlanStep(fields[0].strip(), fields[1], deps))

    output = _parse_output(sections["OUTPUT"], raw)
    plan = DecompositionPlan(tuple(entities), tuple(conditions), tuple(steps), output)
    _check_invariants(plan, raw)
    return plan


def _strip_fence(raw: str) -> str:
    text = raw.strip()
    if "```" not in text:
        return text
    start = text.find("```")
    newline = text.find("\n", start)
    if newline < 0:
        return text
    end = text.find("```", newline)
    if end < 0:
        return text[newline + 1 :]
    return text[newline + 1 : end]


def _split_sections(body: str, raw: str) -> dict[str, list[str]]:
    sections: dict[str, list[str]] = {}
    current: Optional[str] = None
    for line in body.splitlines():
        stripped = line.strip()
        if not stripped:
            continue
        header = stripped.rstrip(":").upper()
        if header in SECTION_NAMES:
            current = header
            sections.setdefault(current, [])
            continue
        if current is None:
            raise PlanParseError(
                f"content before any section header: {stripped!r}",
                raw_text=raw,
                field_path="sections",
            )
        sections[current].append(line)
    for name in SECTION_NAMES:
        if name not in sections:
            raise PlanParseError(
                f"missing section {name}",
                raw_text=raw,
                field_path=name.lower() if name != "OUTPUT" else "output_spec",
            )
    return sections


def _records(lines: list[str]) -> list[list[str]]:
    return [[f.strip() for f in line.split("\t")] for line in lines]


def _parse_output(lines: list[str], raw: str) -> OutputSpec:
    columns: tuple[str, ...] = ()
    ordering: Optional[str] = None
    limit: Optional[int] = None
    for fields in _records(lines):
        if len(fields) < 2:
            raise PlanParseError(
                f"output line needs key and value: {fields!r}",
                raw_text=raw,
                field_path="output_spec",
            )
        key = fields[0].lower()
        value = fields[1]
        if key == "columns":
            columns = tuple(c.strip() for c in value.split(",") if c.strip())
        elif key == "ordering":
            ordering = None if value.strip() in ("", "-") else value.strip()
        elif key == "limit":
            if value.strip() in ("", "-"):
                limit = None
            else:
                try:
                    limit = int(value.strip())
                except ValueError:
                    raise PlanParseError(
                        f"limit must be an integer, got {value!r}",
                        raw_text=raw,
                        field_path="output_spec.limit",
                    ) from None
        else:
            raise PlanParseError(
                f"unknown output key {fields[0]!r}",
                raw_text=raw,
                field_path="output_spec",
            )
    if not columns:
        raise PlanParseError(
            "output columns must be non-empty",
            raw_text=raw,
            field_path="output_spec.columns",
        )
    return OutputSpec(columns, ordering, limit)


def _check_invariants(plan: DecompositionPlan, raw: str) -> None:
    seen = set()
    for i, step in enumerate(plan.steps):
        if not step.step_id:
            raise PlanParseError("step id must be non-empty", raw_text=raw, field_path=f"steps[{i}]")
        if step.step_id in seen:
            raise PlanParseError(
                f"duplicate step id {step.step_id!r}", raw_text=raw, field_path=f"steps[{i}]"
            )
        seen.add(step.step_id)
    for i, step in enumerate(plan.steps):
        for dep in step.depends_on:
            if dep not in seen:
                raise PlanParseError(
                    f"step {step.step_id!r} depends on unknown step {dep!r}",
                    raw_text=raw,
                    field_path=f"steps[{i}].depends_on",
                )
    cycle = _find_cycle({s.step_id: s.depends_on for s in plan.steps})
    if cycle:
        raise PlanParseError(
            f"steps do not form a DAG; cycle involving {', '.join(cycle)}",
            raw_text=raw,
            field_path="steps",
        )
    descriptions = " ".join(s.description.lower() for s in plan.steps)
    for i, cond in enumerate(plan.conditions):
        if cond.requires_subquery and cond.nl_phrase.lower() not in descriptions:
            raise PlanParseError(
                f"subquery condition {cond.nl_phrase!r} is not referenced by any step",
                raw_text=raw,
                field_path=f"conditions[{i}]",
            )


def _find_cycle(graph: dict[str, tuple[str, ...]]) -> list[str]:
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {node: WHITE for node in graph}
    stack_path: list[str] = []

    def visit(node: str) -> Optional[list[str]]:
        color[node] = GRAY
        stack_path.append(node)
        for dep in graph.get(node, ()):
            if color.get(dep, BLACK) == GRAY:
                idx = stack_path.index(dep)
                return stack_path[idx:]
            if color.get(dep) == WHITE:
                found = visit(dep)
                if found:
                    return found
        stack_path.pop()
        color[node] = BLACK
        return None

    for node in graph:
        if color[node] == WHITE:
            found = visit(node)
            if found:
                return sorted(set(found))
    return []


def serialize_plan(plan: DecompositionPlan) -> str:
    """Inverse of parse_plan on valid plans (round-trip identity)."""
    lines = ["ENTITIES"]
    for e in plan.entities:
        lines.append(f"{e.nl_phrase}\t{e.binding}\t{e.note}")
    lines.append("CONDITIONS")
    for c in plan.conditions:
        flag = "subquery" if c.requires_subquery else "simple"
        lines.append(f"{c.nl_phrase}\t{c.predicate_sketch}\t{flag}")
    lines.append("STEPS")
    for s in plan.steps:
        deps = ",".join(s.depends_on) if s.depends_on else "-"
        lines.append(f"{s.step_id}\t{s.description}\t{deps}")
    lines.append("OUTPUT")
    lines.append("columns\t" + ",".join(plan.output_spec.columns))
    if plan.output_spec.ordering is not None:
        lines.append(f"ordering\t{plan.output_spec.ordering}")
    if plan.output_spec.limit is not None:
        lines.append(f"limit\t{plan.output_spec.limit}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# catalog validation of entity bindings


def validate_bindings(plan: DecompositionPlan, catalog: SchemaCatalog, raw: str = "") -> None:
    """Every entity binding must name a known table/column, or be an
    expression whose table.column references all resolve."""
    for i, entity in enumerate(plan.entities):
        problems = _binding_problems(entity.binding, catalog)
        if problems:
            raise PlanParseError(
                f"entity {entity.nl_phrase!r}: {'; '.join(problems)}",
                raw_text=raw,
                field_path=f"entities[{i}].binding",
            )


def _binding_problems(binding: str, catalog: SchemaCatalog) -> list[str]:
    try:
        tokens = sqltext.tokenize(binding)
    except sqltext.SqlLexError as exc:
        return [str(exc)]
    problems = []
    idx = 0
    while idx < len(tokens):
        tok = tokens[idx]
        nxt = tokens[idx + 1] if idx + 1 < len(tokens) else None
        if tok.kind == "ident":
            if nxt is not None and nxt.text == "(":  # function call
                idx += 1
                continue
            if nxt is not None and nxt.value == "." and idx + 2 < len(tokens):
                col = tokens[idx + 2]
                if not catalog.has_table(tok.value):
                    problems.append(f"unknown table {tok.value!r}")
                elif col.kind == "ident" and not catalog.has_column(tok.value, col.value):
                    problems.append(f"unknown column {col.value!r} in {tok.value}")
                idx += 3
                continue
            if not catalog.has_table(tok.value) and not catalog.all_column_owners(tok.value):
                problems.append(f"unknown table or column {tok.value!r}")
        idx += 1
    return problems


# ---------------------------------------------------------------------------
# backend call


def segments_text(context: SchemaContext) -> str:
    return "\n".join(f"[{s.segment.id}] {s.segment.text}" for s in context.segments)


def evidence_text(context: SchemaContext) -> str:
    lines = [
        f"{e.nl_term} -> {e.table}.{e.column} = {e.db_value!r}"
        for e in context.evidence.entries
    ]
    return "\n".join(lines) if lines else "(none)"


def question_text(question: Question) -> str:
    if question.evidence_hint:
        return f"{question.text}\nHint: {question.evidence_hint}"
    return question.text


def build_decompose_prompt(
    question: Question, context: SchemaContext, template: Optional[str] = None
) -> str:
    template = template if template is not None else prompts.load("decomposer.txt")
    return prompts.fill(
        template,
        catalog=catalog_summary(context.catalog),
        segments=segments_text(context),
        evidence=evidence_text(context),
        question=question_text(question),
    )


def decompose(
    question: Question,
    context: SchemaContext,
    backend: BackendSpec,
    params: GenerationParams = GenerationParams(),
    template: Optional[str] = None,
    on_completion: Optional[Callable[[Completion], None]] = None,
) -> DecompositionPlan:
    """Ask the decomposition backend for a plan.

    Transport errors are retried once. A parse failure triggers exactly one
    re-prompt with the parse error appended; a second failure surfaces the
    PlanParseError with the raw text preserved.
    """
    if backend.role is not Role.DECOMPOSER:
        raise ValueError(f"backend role must be DECOMPOSER, got {backend.role}")
    prompt = build_decompose_prompt(question, context, template)
    completion = _complete_with_retry(backend, prompt, params, on_completion)
    try:
        plan = parse_plan(completion.text)
        validate_bindings(plan, context.catalog, completion.text)
        return plan
    except PlanParseError as first_error:
        logger.info("plan parse failed (%s); re-prompting once", first_error)
        retry_prompt = (
            f"{prompt}\n\nYour previous plan was rejected: {first_error}\n"
            "Emit a corrected plan in the same format."
        )
        completion = _complete_with_retry(backend, retry_prompt, params, on_completion)
        plan = parse_plan(completion.text)
        validate_bindings(plan, context.catalog, completion.text)
        return plan


def _complete_with_retry(
    backend: BackendSpec,
    prompt: str,
    params: GenerationParams,
    on_completion: Optional[Callable[[Completion], None]],
) -> Completion:
    try:
        completion = complete(backend, prompt, params)
    except TransportError:
        completion = complete(backend, prompt, params)
    if on_completion is not None:
        on_completion(completion)
    return completion
