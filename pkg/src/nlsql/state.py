"""Domain types and the pipeline state machine.

A question moves through extraction, decomposition, generation and
validation as an immutable value: every accepted event returns a new state
with the event appended to the trace, so a trace can be replayed to
reconstruct the exact state (event sourcing) and audited after the fact.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Sequence

from .errors import ConfigurationError, StateMachineError
from .gateway import TokenUsage

Clock = Callable[[], float]


class Stage(Enum):
    CREATED = 0
    EXTRACTED = 1
    DECOMPOSED = 2
    GENERATED = 3
    VALIDATED = 4
    DONE = 5
    FAILED = 6


class EventKind(Enum):
    CREATED = "created"
    EXTRACTED = "extracted"
    DECOMPOSED = "decomposed"
    GENERATED = "generated"
    FALLBACK_RETRY = "fallback_retry"
    VALIDATED = "validated"
    DONE = "done"
    FAILED = "failed"


# Which stage each event lands in, and which stage it must start from.
_EVENT_TARGET = {
    EventKind.EXTRACTED: Stage.EXTRACTED,
    EventKind.DECOMPOSED: Stage.DECOMPOSED,
    EventKind.GENERATED: Stage.GENERATED,
    EventKind.FALLBACK_RETRY: Stage.GENERATED,
    EventKind.VALIDATED: Stage.VALIDATED,
    EventKind.DONE: Stage.DONE,
}

MAX_FALLBACK_ATTEMPTS = 3


@dataclass(frozen=True)
class Question:
    text: str
    db_id: str
    evidence_hint: Optional[str] = None

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ValueError("question text must be non-empty")
        if not self.db_id:
            raise ValueError("db_id must be non-empty")


@dataclass(frozen=True)
class StageEvent:
    kind: EventKind
    at: float
    payload: Any = None


@dataclass(frozen=True)
class PipelineState:
    question: Question
    stage: Stage = Stage.CREATED
    schema_context: Any = None
    plan: Any = None
    candidate: Any = None
    attempts: int = 0
    trace: tuple[StageEvent, ...] = ()


class Outcome(Enum):
    SUCCESS = "success"
    GENERATION_FAILURE = "generation_failure"
    EXTRACTION_FAILURE = "extraction_failure"


class Route(Enum):
    LOCAL_ONLY = "local"
    FALLBACK_USED = "fallback"


@dataclass(frozen=True)
class PipelineResult:
    outcome: Outcome
    sql: Optional[str]
    rows: Optional[tuple]
    route: Route
    fallback_attempts: int
    usage: Mapping[str, TokenUsage]

    def __post_init__(self):
        if not 0 <= self.fallback_attempts <= MAX_FALLBACK_ATTEMPTS:
            raise ValueError("fallback_attempts out of range")
        if self.outcome is Outcome.SUCCESS:
            if self.sql is None or self.rows is None:
                raise ValueError("a successful result must carry sql and rows")
            if (self.route is Route.LOCAL_ONLY) != (self.fallback_attempts == 0):
                raise ValueError("local route and zero fallback attempts imply each other")
        if (
            self.outcome is Outcome.GENERATION_FAILURE
            and self.fallback_attempts != MAX_FALLBACK_ATTEMPTS
        ):
            raise ValueError("generation failure implies all fallback attempts were used")


class DatabaseRegistry:
    """Resolves database ids to files under ``<root>/<db_id>/<db_id>.sqlite``."""

    def __init__(self, databases_root: Path | str):
        self.root = Path(databases_root)

    def db_dir(self, db_id: str) -> Path:
        return self.root / db_id

    def database_path(self, db_id: str) -> Path:
        path = self.db_dir(db_id) / f"{db_id}.sqlite"
        if not path.is_file():
            raise ConfigurationError(f"unknown database id {db_id!r}: expected {path}")
        return path

    def has(self, db_id: str) -> bool:
        return (self.db_dir(db_id) / f"{db_id}.sqlite").is_file()

    def docs_path(self, db_id: str) -> Path:
        return self.db_dir(db_id) / f"{db_id}.docs.jsonl"

    def evidence_path(self, db_id: str) -> Path:
        return self.db_dir(db_id) / f"{db_id}.evidence.jsonl"

    def cache_path(self, db_id: str) -> Path:
        return self.db_dir(db_id) / f"{db_id}.emb.bin"


def new_pipeline(
    question: Question,
    registry: DatabaseRegistry,
    clock: Clock = time.time,
) -> PipelineState:
    """Create the pre-extraction state with a single creation trace event."""
    registry.database_path(question.db_id)  # raises ConfigurationError if unknown
    event = StageEvent(EventKind.CREATED, clock(), question)
    return PipelineState(question=question, trace=(event,))


def make_event(kind: EventKind, payload: Any = None, clock: Clock = time.time) -> StageEvent:
    return StageEvent(kind, clock(), payload)


def advance(state: PipelineState, event: StageEvent) -> PipelineState:
    """Apply one stage event, enforcing monotone transitions.

    Legal moves: each stage to its immediate successor, a fallback re-entry
    into GENERATED (attempt counter bumps, capped at 3), and FAILED from any
    non-terminal stage. Anything else is a StateMachineError.
    """
    if state.stage in (Stage.DONE, Stage.FAILED):
        raise StateMachineError(f"pipeline already terminal at {state.stage.name}")
    if event.kind is EventKind.CREATED:
        raise StateMachineError("creation event cannot be applied to a live state")

    if event.kind is EventKind.FAILED:
        return replace(state, stage=Stage.FAILED, trace=state.trace + (event,))

    if event.kind is EventKind.FALLBACK_RETRY:
        if state.stage is not Stage.GENERATED:
            raise StateMachineError(
                f"fallback retry only re-enters GENERATED, not {state.stage.name}"
            )
        if state.attempts >= MAX_FALLBACK_ATTEMPTS:
            raise StateMachineError("fallback attempts exhausted")
        return replace(
            state,
            attempts=state.attempts + 1,
            candidate=event.payload if event.payload is not None else state.candidate,
            trace=state.trace + (event,),
        )

    target = _EVENT_TARGET.get(event.kind)
    if target is None:
        raise StateMachineError(f"unknown event kind {event.kind!r}")
    if target.value != state.stage.value + 1:
        raise StateMachineError(
            f"illegal transition {state.stage.name} -> {target.name} via {event.kind.value}"
        )

    updates: dict[str, Any] = {"stage": target, "trace": state.trace + (event,)}
    if event.kind is EventKind.EXTRACTED:
        updates["schema_context"] = event.payload
    elif event.kind is EventKind.DECOMPOSED:
        updates["plan"] = event.payload
    elif event.kind is EventKind.GENERATED:
        updates["candidate"] = event.payload
    return replace(state, **updates)


def replay(trace: Sequence[StageEvent]) -> PipelineState:
    """Rebuild a state from its trace. The first event must be the creation
    event carrying the question; the result equals the original state."""
    if not trace or trace[0].kind is not EventKind.CREATED:
        raise StateMachineError("trace must start with a creation event")
    question = trace[0].payload
    if not isinstance(question, Question):
        raise StateMachineError("creation event payload must be the question")
    state = PipelineState(question=question, trace=(trace[0],))
    for event in trace[1:]:
        state = advance(state, event)
    return state


def check_payload_invariant(state: PipelineState) -> bool:
    """Each stage's payload is present iff that stage has completed (does not
    apply to short-circuited FAILED states)."""
    if state.stage is Stage.FAILED:
        return True
    reached = state.stage.value
    checks = [
        (Stage.EXTRACTED, state.schema_context),
        (Stage.DECOMPOSED, state.plan),
        (Stage.GENERATED, state.candidate),
    ]
    for stage, payload in checks:
        if (payload is not None) != (reached >= stage.value):
            return False
    return True
