"""End-to-end pipeline orchestration.

One engine owns the database registry, the role-to-backend bindings, the
retrieval settings and the cost ledger. Each run threads a question through
extraction, decomposition, the generation ladder and validation, recording
token usage per backend and emitting a fully traced pipeline state.

Engines are safe to share across threads: per-database assets are built
once under a lock and are immutable afterwards; the ledger serializes its
own appends.
"""

from __future__ import annotations

import logging
import threading
import time
import uuid
from dataclasses import dataclass
from typing import Callable, Mapping, Optional

from . import schema as schema_mod
from .errors import ConfigurationError, NlsqlError
from .gateway import (
    BackendSpec,
    CostLedger,
    GenerationParams,
    Role,
    TokenUsage,
    record_usage,
)
from .generate import GenerationOutcome, Origin, run_ladder
from .plan import decompose
from .state import (
    DatabaseRegistry,
    EventKind,
    Outcome,
    PipelineResult,
    PipelineState,
    Question,
    Route,
    advance,
    make_event,
    new_pipeline,
)
from .validate import Accepted, SandboxLimits, validate_full

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RetrievalConfig:
    k: int = 10
    cosine_weight: float = 0.7
    lexical_weight: float = 0.3
    score_threshold: float = 0.2
    keep: int = 5
    embed_dim: int = schema_mod.DEFAULT_EMBED_DIM

    def __post_init__(self):
        if abs(self.cosine_weight + self.lexical_weight - 1.0) > 1e-9:
            raise ConfigurationError("retrieval blend weights must sum to 1")


@dataclass
class _DbAssets:
    catalog: schema_mod.SchemaCatalog
    store: schema_mod.VectorStore
    evidence: schema_mod.EvidenceMap


@dataclass(frozen=True)
class EngineRunResult:
    result: PipelineResult
    state: PipelineState
    generation: Optional[GenerationOutcome]
    acceptance: Optional[Accepted]
    query_id: str


class PipelineEngine:
    """Runs questions through the full pipeline with shared assets."""

    def __init__(
        self,
        registry: DatabaseRegistry,
        backends: Mapping[Role, BackendSpec],
        retrieval: RetrievalConfig = RetrievalConfig(),
        limits: SandboxLimits = SandboxLimits(),
        strict_semantic: bool = False,
        ledger: Optional[CostLedger] = None,
        clock: Callable[[], float] = time.time,
        api_token: Optional[str] = None,
    ):
        missing = [role.value for role in Role if role not in backends]
        if missing:
            raise ConfigurationError(f"backends missing for roles: {', '.join(missing)}")
        self.registry = registry
        self.backends = dict(backends)
        self.retrieval = retrieval
        self.limits = limits
        self.strict_semantic = strict_semantic
        self.ledger = ledger if ledger is not None else CostLedger()
        self.clock = clock
        self.params = GenerationParams(api_token=api_token)
        self._assets: dict[str, _DbAssets] = {}
        self._assets_lock = threading.Lock()

    # ------------------------------------------------------------------
    # assets

    def _db_assets(self, db_id: str) -> _DbAssets:
        with self._assets_lock:
            cached = self._assets.get(db_id)
            if cached is not None:
                return cached
            db_path = self.registry.database_path(db_id)
            catalog = schema_mod.introspect_schema(db_path)
            store = self._build_store(db_id)
            evidence = schema_mod.load_evidence(self.registry.evidence_path(db_id))
            assets = _DbAssets(catalog, store, evidence)
            self._assets[db_id] = assets
            return assets

    def _build_store(self, db_id: str) -> schema_mod.VectorStore:
        docs_path = self.registry.docs_path(db_id)
        if not docs_path.is_file():
            logger.warning("no documentation file for %s; retrieval will be empty", db_id)
            return schema_mod.VectorStore(self.retrieval.embed_dim)
        records = schema_mod.load_doc_records(docs_path)
        cache_path = self.registry.cache_path(db_id)
        cached = None
        if cache_path.is_file():
            cached = schema_mod.read_embedding_cache(cache_path)
        return schema_mod.build_store(
            records, self.backends[Role.EMBEDDER], self.retrieval.embed_dim, cached
        )

    # ------------------------------------------------------------------
    # run

    def run(self, question: Question, query_id: Optional[str] = None) -> EngineRunResult:
        """Run one question end to end.

        Extraction problems surface as an EXTRACTION_FAILURE result; an
        exhausted generation ladder surfaces as GENERATION_FAILURE. Plan
        parse and transport errors from the decomposer propagate to the
        caller, which decides how to report them.
        """
        qid = query_id if query_id is not None else uuid.uuid4().hex[:12]
        state = new_pipeline(question, self.registry, self.clock)
        usage_by_backend: dict[str, TokenUsage] = {}

        def account(backend: BackendSpec, usage: TokenUsage) -> None:
            record_usage(self.ledger, qid, backend, usage)
            prior = usage_by_backend.get(backend.name, TokenUsage())
            usage_by_backend[backend.name] = prior + usage

        try:
            assets = self._db_assets(question.db_id)
        except (NlsqlError, OSError) as exc:  # unreadable database, bad docs/cache file
            state = advance(state, make_event(EventKind.FAILED, str(exc), self.clock))
            self.ledger.assign_route(qid, "failed")
            result = PipelineResult(
                outcome=Outcome.EXTRACTION_FAILURE,
                sql=None,
                rows=None,
                route=Route.LOCAL_ONLY,
                fallback_attempts=0,
                usage={},
            )
            return EngineRunResult(result, state, None, None, qid)

        started = time.perf_counter()
        query_vec = schema_mod.embed(
            self.backends[Role.EMBEDDER], question.text, self.retrieval.embed_dim
        )
        scored = schema_mod.retrieve(assets.store, query_vec, self.retrieval.k) if len(
            assets.store
        ) else []
        reranked = schema_mod.rerank_filter(
            scored,
            question.text,
            cosine_weight=self.retrieval.cosine_weight,
            lexical_weight=self.retrieval.lexical_weight,
            score_threshold=self.retrieval.score_threshold,
            keep=self.retrieval.keep,
        )
        context = schema_mod.build_context(
            assets.catalog,
            reranked,
            assets.evidence,
            question,
            retrieval_latency_s=time.perf_counter() - started,
        )
        state = advance(state, make_event(EventKind.EXTRACTED, context, self.clock))

        decomposer = self.backends[Role.DECOMPOSER]
        plan = decompose(
            question,
            context,
            decomposer,
            params=self.params,
            on_completion=lambda c: account(decomposer, c.usage),
        )
        state = advance(state, make_event(EventKind.DECOMPOSED, plan, self.clock))

        db_path = self.registry.database_path(question.db_id)
        validator = lambda sql: validate_full(
            sql,
            context,
            plan,
            db_path,
            self.limits,
            strict_semantic=self.strict_semantic,
        )
        generation = run_ladder(
            question,
            plan,
            context,
            self.backends[Role.PRIMARY_GENERATOR],
            self.backends[Role.FALLBACK_GENERATOR],
            validator,
            self.params,
        )
        for candidate in generation.candidates:
            backend = (
                self.backends[Role.PRIMARY_GENERATOR]
                if candidate.origin is Origin.PRIMARY
                else self.backends[Role.FALLBACK_GENERATOR]
            )
            account(backend, candidate.usage)

        state = self._trace_generation(state, generation)
        result = self._build_result(generation, usage_by_backend)
        if result.outcome is Outcome.SUCCESS:
            acceptance = generation.acceptance
            state = advance(state, make_event(EventKind.VALIDATED, acceptance.outcome, self.clock))
            state = advance(state, make_event(EventKind.DONE, result, self.clock))
            route_label = "local" if result.route is Route.LOCAL_ONLY else "fallback"
        else:
            last = generation.bundle_history[-1] if generation.bundle_history else None
            state = advance(state, make_event(EventKind.FAILED, last, self.clock))
            route_label = "failed"
        self.ledger.assign_route(qid, route_label)
        return EngineRunResult(result, state, generation, generation.acceptance, qid)

    def _trace_generation(self, state: PipelineState, generation: GenerationOutcome):
        primary = [c for c in generation.candidates if c.origin is Origin.PRIMARY]
        fallbacks = [c for c in generation.candidates if c.origin is Origin.FALLBACK]
        if not primary and not fallbacks and generation.final is None:
            return state  # nothing was ever produced; stays DECOMPOSED until FAILED
        state = advance(
            state,
            make_event(EventKind.GENERATED, primary[0] if primary else None, self.clock),
        )
        by_attempt = {c.attempt: c for c in fallbacks}
        for attempt in range(1, generation.attempts_used + 1):
            state = advance(
                state,
                make_event(EventKind.FALLBACK_RETRY, by_attempt.get(attempt), self.clock),
            )
        return state

    def _build_result(
        self, generation: GenerationOutcome, usage: dict[str, TokenUsage]
    ) -> PipelineResult:
        if generation.final is not None and generation.acceptance is not None:
            return PipelineResult(
                outcome=Outcome.SUCCESS,
                sql=generation.final.sql,
                rows=generation.acceptance.outcome.rows,
                route=Route.LOCAL_ONLY if generation.attempts_used == 0 else Route.FALLBACK_USED,
                fallback_attempts=generation.attempts_used,
                usage=dict(usage),
            )
        return PipelineResult(
            outcome=Outcome.GENERATION_FAILURE,
            sql=None,
            rows=None,
            route=Route.FALLBACK_USED,
            fallback_attempts=generation.attempts_used,
            usage=dict(usage),
        )
