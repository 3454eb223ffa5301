"""SQL generation: cheap primary attempt, then a bounded fallback ladder.

The primary (small, local) backend always goes first. Only when its
candidate is rejected does the fallback (large, remote) backend get
invoked, fed the question, the failed SQL and every diagnostic verbatim.
At most three fallback regenerations run before the query is reported as a
generation failure; every rejection leaves one diagnostic bundle in the
history, so a full failure carries four bundles.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Optional

from . import prompts, sqltext
from .errors import GenerationError, TransportError
from .gateway import BackendSpec, GenerationParams, Role, TokenUsage, complete
from .plan import (
    DecompositionPlan,
    evidence_text,
    question_text,
    serialize_plan,
)
from .schema import SchemaContext, catalog_summary
from .state import MAX_FALLBACK_ATTEMPTS, Question

logger = logging.getLogger(__name__)


class Origin(Enum):
    PRIMARY = "primary"
    FALLBACK = "fallback"


@dataclass(frozen=True)
class SqlCandidate:
    sql: str
    origin: Origin
    attempt: int = 0  # 0 for primary, 1..3 for fallback
    usage: TokenUsage = TokenUsage()

    def __post_init__(self):
        if not self.sql:
            raise ValueError("candidate sql must be non-empty")
        if self.origin is Origin.PRIMARY and self.attempt != 0:
            raise ValueError("primary candidates have attempt 0")
        if self.origin is Origin.FALLBACK and not 1 <= self.attempt <= MAX_FALLBACK_ATTEMPTS:
            raise ValueError("fallback attempt must be in 1..3")


@dataclass(frozen=True)
class DiagnosticBundle:
    """What the fallback generator gets to see about a rejected candidate."""

    execution_errors: tuple[str, ...] = ()
    validation_warnings: tuple[str, ...] = ()
    failed_sql: str = ""

    def __post_init__(self):
        if not self.execution_errors and not self.validation_warnings:
            raise ValueError("a diagnostic bundle must carry at least one error or warning")


@dataclass(frozen=True)
class GenerationOutcome:
    final: Optional[SqlCandidate]  # None marks a generation failure
    attempts_used: int
    bundle_history: tuple[DiagnosticBundle, ...]
    candidates: tuple[SqlCandidate, ...] = ()  # everything produced, accepted or not
    acceptance: object = None  # validate.Accepted for the winning candidate

    def __post_init__(self):
        if self.final is None and self.attempts_used != MAX_FALLBACK_ATTEMPTS:
            raise ValueError("generation failure implies all fallback attempts were used")


def extract_sql(completion_text: str) -> str:
    """First fenced code block if present, else the whole completion trimmed."""
    text = completion_text.strip()
    start = text.find("```")
    if start < 0:
        return text
    newline = text.find("\n", start)
    if newline < 0:
        return text[start + 3 :].strip()
    end = text.find("```", newline)
    block = text[newline + 1 : end] if end >= 0 else text[newline + 1 :]
    return block.strip()


def generate_primary(
    plan: DecompositionPlan,
    context: SchemaContext,
    backend: BackendSpec,
    question: Question,
    params: GenerationParams = GenerationParams(),
    template: Optional[str] = None,
) -> SqlCandidate:
    """One attempt from the primary backend. Transport errors are retried
    once; an empty completion is a GenerationError."""
    if backend.role is not Role.PRIMARY_GENERATOR:
        raise ValueError(f"backend role must be PRIMARY_GENERATOR, got {backend.role}")
    template = template if template is not None else prompts.load("generator_primary.txt")
    prompt = prompts.fill(
        template,
        plan=serialize_plan(plan),
        catalog=catalog_summary(context.catalog),
        evidence=evidence_text(context),
        question=question_text(question),
    )
    completion = _complete_once_retried(backend, prompt, params)
    sql = extract_sql(completion.text)
    if not sql:
        raise GenerationError(f"primary backend {backend.name!r} returned an empty completion")
    return SqlCandidate(sql, Origin.PRIMARY, 0, completion.usage)


def generate_fallback(
    question: Question,
    plan: DecompositionPlan,
    bundle: DiagnosticBundle,
    backend: BackendSpec,
    attempt: int,
    context: Optional[SchemaContext] = None,
    params: GenerationParams = GenerationParams(),
    template: Optional[str] = None,
) -> SqlCandidate:
    """One corrective attempt from the fallback backend. The prompt carries
    the question, the failed SQL and every diagnostic string verbatim."""
    if backend.role is not Role.FALLBACK_GENERATOR:
        raise ValueError(f"backend role must be FALLBACK_GENERATOR, got {backend.role}")
    if not 1 <= attempt <= MAX_FALLBACK_ATTEMPTS:
        raise ValueError(f"attempt must be in 1..{MAX_FALLBACK_ATTEMPTS}, got {attempt}")
    template = template if template is not None else prompts.load("generator_fallback.txt")
    prompt = prompts.fill(
        template,
        question=question_text(question),
        catalog=catalog_summary(context.catalog) if context is not None else "(not available)",
        evidence=evidence_text(context) if context is not None else "(none)",
        plan=serialize_plan(plan),
        failed_sql=bundle.failed_sql or "(no SQL was produced)",
        errors="\n".join(bundle.execution_errors) or "(none)",
        warnings="\n".join(bundle.validation_warnings) or "(none)",
    )
    completion = _complete_once_retried(backend, prompt, params)
    sql = extract_sql(completion.text)
    if not sql:
        raise GenerationError(f"fallback backend {backend.name!r} returned an empty completion")
    return SqlCandidate(sql, Origin.FALLBACK, attempt, completion.usage)


def _complete_once_retried(backend: BackendSpec, prompt: str, params: GenerationParams):
    try:
        return complete(backend, prompt, params)
    except TransportError:
        return complete(backend, prompt, params)


Validator = Callable[[str], object]  # str -> validate.Accepted | validate.Rejected


def run_ladder(
    question: Question,
    plan: DecompositionPlan,
    context: SchemaContext,
    primary: BackendSpec,
    fallback: BackendSpec,
    validator: Validator,
    params: GenerationParams = GenerationParams(),
) -> GenerationOutcome:
    """Primary first, then fallback attempts 1..3, stopping at the first
    accepted candidate.

    A backend transport failure consumes the attempt and leaves a synthetic
    bundle noting the transport error. Each fallback attempt sees only the
    most recent bundle; the full history is kept for reporting.
    """
    from .validate import Accepted  # runtime import, validate depends on this module

    bundles: list[DiagnosticBundle] = []
    produced: list[SqlCandidate] = []

    def try_candidate(candidate: SqlCandidate) -> Optional[GenerationOutcome]:
        produced.append(candidate)
        extra = sqltext.statement_count(candidate.sql)
        if extra > 1:
            bundles.append(
                DiagnosticBundle(
                    validation_warnings=("multiple statements",),
                    failed_sql=candidate.sql,
                )
            )
            return None
        decision = validator(candidate.sql)
        if isinstance(decision, Accepted):
            final = replace(candidate, sql=decision.sql_final)
            return GenerationOutcome(
                final=final,
                attempts_used=candidate.attempt,
                bundle_history=tuple(bundles),
                candidates=tuple(produced),
                acceptance=decision,
            )
        bundles.append(decision.bundle)
        return None

    try:
        candidate = generate_primary(plan, context, primary, question, params)
    except (TransportError, GenerationError) as exc:
        bundles.append(
            DiagnosticBundle(execution_errors=(f"primary generation failed: {exc}",))
        )
    else:
        outcome = try_candidate(candidate)
        if outcome is not None:
            return outcome

    for attempt in range(1, MAX_FALLBACK_ATTEMPTS + 1):
        logger.info("fallback attempt %d for %r", attempt, question.text[:60])
        try:
            candidate = generate_fallback(
                question, plan, bundles[-1], fallback, attempt, context, params
            )
        except (TransportError, GenerationError) as exc:
            bundles.append(
                DiagnosticBundle(
                    execution_errors=(f"fallback attempt {attempt} failed: {exc}",)
                )
            )
            continue
        outcome = try_candidate(candidate)
        if outcome is not None:
            return outcome

    return GenerationOutcome(
        final=None,
        attempts_used=MAX_FALLBACK_ATTEMPTS,
        bundle_history=tuple(bundles),
        candidates=tuple(produced),
        acceptance=None,
    )
