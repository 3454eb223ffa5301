"""Uniform interface to text-generation backends with token accounting.

Three backend flavours share one call surface:

* an HTTP chat-completion endpoint (local inference server or remote API),
* a deterministic scripted backend driven by prompt-keyed fixtures (tests),
* a scripted embedder (see schema.embed).

Money is tracked in integer picodollars. Rates are quoted in dollars per
million tokens, so one token at rate r costs exactly ``round(r * 1e6)``
picodollars; accumulating integers keeps ledger totals exact under any
interleaving of recordings (additivity holds to the last bit, and zero-rate
backends cost exactly zero).
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Optional, Sequence, Union

import requests

from .errors import ProtocolError, TransportError

PICO_PER_DOLLAR = 10**12


class Role(Enum):
    DECOMPOSER = "decomposer"
    PRIMARY_GENERATOR = "primary_generator"
    FALLBACK_GENERATOR = "fallback_generator"
    EMBEDDER = "embedder"


@dataclass(frozen=True)
class TokenUsage:
    input_tokens: int = 0
    output_tokens: int = 0

    def __post_init__(self):
        if self.input_tokens < 0 or self.output_tokens < 0:
            raise ValueError("token counts must be non-negative")

    def __add__(self, other: "TokenUsage") -> "TokenUsage":
        return TokenUsage(
            self.input_tokens + other.input_tokens,
            self.output_tokens + other.output_tokens,
        )


@dataclass(frozen=True)
class Pricing:
    """Dollars per million input/output tokens. Local backends use (0, 0)."""

    input_per_million: float = 0.0
    output_per_million: float = 0.0

    def __post_init__(self):
        if self.input_per_million < 0 or self.output_per_million < 0:
            raise ValueError("pricing rates must be non-negative")

    @classmethod
    def free(cls) -> "Pricing":
        return cls(0.0, 0.0)

    def cost_picodollars(self, usage: TokenUsage) -> int:
        # $/1M tokens == microdollars/token; scale to picodollars to stay
        # integral for fractional microdollar rates like 2.50.
        in_rate = round(self.input_per_million * 1_000_000)
        out_rate = round(self.output_per_million * 1_000_000)
        return usage.input_tokens * in_rate + usage.output_tokens * out_rate

    def cost_dollars(self, usage: TokenUsage) -> float:
        return self.cost_picodollars(usage) / PICO_PER_DOLLAR


class ScriptedFixtures:
    """Prompt-keyed canned responses for deterministic tests.

    A key is matched either exactly against the whole prompt or, failing
    that, as the longest fixture key contained in the prompt (rendered
    prompts embed the original question, so tests key fixtures on question
    text or on distinctive diagnostic strings). A key may map to a sequence
    of responses; successive calls walk the sequence and stick on the last
    entry, which is how retry ladders are scripted.
    """

    def __init__(self, fixtures: Mapping[str, Union[str, Sequence[str]]]):
        if not fixtures:
            raise ValueError("fixtures must be non-empty")
        self._responses: dict[str, tuple[str, ...]] = {}
        for key, value in fixtures.items():
            if isinstance(value, str):
                self._responses[key] = (value,)
            else:
                seq = tuple(value)
                if not seq:
                    raise ValueError(f"fixture {key!r} has an empty response sequence")
                self._responses[key] = seq
        self._cursor: dict[str, int] = {}
        self._lock = threading.Lock()

    def __eq__(self, other) -> bool:
        return isinstance(other, ScriptedFixtures) and self._responses == other._responses

    def resolve(self, prompt: str) -> str:
        key = self._match(prompt)
        if key is None:
            head = prompt if len(prompt) <= 80 else prompt[:77] + "..."
            raise ProtocolError(f"no scripted fixture matches prompt-key {head!r}")
        with self._lock:
            idx = self._cursor.get(key, 0)
            responses = self._responses[key]
            self._cursor[key] = idx + 1
            return responses[min(idx, len(responses) - 1)]

    def _match(self, prompt: str) -> Optional[str]:
        if prompt in self._responses:
            return prompt
        candidates = [k for k in self._responses if k in prompt]
        if not candidates:
            return None
        candidates.sort(key=lambda k: (-len(k), k))
        return candidates[0]


@dataclass(frozen=True)
class BackendSpec:
    """Configuration handle for one model backend.

    ``endpoint`` is either a base URL (the client appends /chat/completions)
    or the literal string "scripted". The handle is shareable and
    read-only; scripted response sequencing lives inside ``fixtures``.
    """

    name: str
    role: Role
    endpoint: str
    pricing: Pricing = field(default_factory=Pricing.free)
    timeout_s: float = 60.0
    fixtures: Optional[ScriptedFixtures] = None
    fixtures_path: Optional[str] = None

    def __post_init__(self):
        if self.timeout_s <= 0:
            raise ValueError("timeout must be positive")

    @property
    def is_scripted(self) -> bool:
        return self.endpoint == "scripted"


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 0.0
    max_tokens: int = 1024
    system: Optional[str] = None
    api_token: Optional[str] = None


@dataclass(frozen=True)
class Completion:
    text: str
    usage: TokenUsage
    latency_s: float


def scripted_backend(
    fixtures: Mapping[str, Union[str, Sequence[str]]],
    *,
    name: str = "scripted",
    role: Role = Role.PRIMARY_GENERATOR,
    pricing: Optional[Pricing] = None,
) -> BackendSpec:
    """Build a deterministic backend answering only the given fixture keys."""
    return BackendSpec(
        name=name,
        role=role,
        endpoint="scripted",
        pricing=pricing or Pricing.free(),
        fixtures=ScriptedFixtures(fixtures),
    )


def complete(
    backend: BackendSpec,
    prompt: str,
    params: GenerationParams = GenerationParams(),
) -> Completion:
    """Run one completion. Never touches any ledger; accounting is the
    caller's job via record_usage."""
    if not prompt:
        raise ValueError("prompt must be non-empty")
    start = time.perf_counter()
    if backend.is_scripted:
        if backend.fixtures is None:
            raise ProtocolError(f"scripted backend {backend.name!r} has no fixtures loaded")
        text = backend.fixtures.resolve(prompt)
        usage = TokenUsage(len(prompt.split()), len(text.split()))
        return Completion(text, usage, time.perf_counter() - start)
    return _complete_http(backend, prompt, params, start)


def _complete_http(
    backend: BackendSpec, prompt: str, params: GenerationParams, start: float
) -> Completion:
    messages = []
    if params.system:
        messages.append({"role": "system", "content": params.system})
    messages.append({"role": "user", "content": prompt})
    payload = {
        "model": backend.name,
        "messages": messages,
        "temperature": params.temperature,
        "max_tokens": params.max_tokens,
    }
    headers = {}
    if params.api_token:
        headers["Authorization"] = f"Bearer {params.api_token}"
    url = backend.endpoint.rstrip("/") + "/chat/completions"
    try:
        resp = requests.post(url, json=payload, headers=headers, timeout=backend.timeout_s)
    except requests.RequestException as exc:
        raise TransportError(f"backend {backend.name!r} unreachable: {exc}") from exc
    if resp.status_code >= 500:
        raise TransportError(f"backend {backend.name!r} returned HTTP {resp.status_code}")
    if resp.status_code != 200:
        raise ProtocolError(
            f"backend {backend.name!r} returned HTTP {resp.status_code}: {resp.text[:200]}"
        )
    try:
        body = resp.json()
        text = body["choices"][0]["message"]["content"]
        usage = TokenUsage(
            int(body["usage"]["prompt_tokens"]),
            int(body["usage"]["completion_tokens"]),
        )
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        raise ProtocolError(f"malformed response from {backend.name!r}: {exc}") from exc
    return Completion(str(text), usage, time.perf_counter() - start)


@dataclass
class BackendTotals:
    usage: TokenUsage
    cost_picodollars: int

    @property
    def cost_dollars(self) -> float:
        return self.cost_picodollars / PICO_PER_DOLLAR


@dataclass(frozen=True)
class LedgerEntry:
    query_id: str
    backend: str
    usage: TokenUsage
    cost_picodollars: int


class CostLedger:
    """Append-only token and cost accounting, safe for concurrent writers.

    Entries are atomic appends and totals are linearizable (one lock guards
    every mutation). Per-query rollups keep first-seen order.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._entries: list[LedgerEntry] = []
        self._per_backend: dict[str, BackendTotals] = {}
        self._routes: dict[str, str] = {}
        self._query_order: list[str] = []

    def record(self, query_id: str, backend: BackendSpec, usage: TokenUsage) -> "CostLedger":
        cost = backend.pricing.cost_picodollars(usage)
        with self._lock:
            self._entries.append(LedgerEntry(query_id, backend.name, usage, cost))
            totals = self._per_backend.get(backend.name)
            if totals is None:
                self._per_backend[backend.name] = BackendTotals(usage, cost)
            else:
                totals.usage = totals.usage + usage
                totals.cost_picodollars += cost
            if query_id not in self._routes:
                self._routes[query_id] = ""
                self._query_order.append(query_id)
        return self

    def assign_route(self, query_id: str, route: str) -> None:
        with self._lock:
            if query_id not in self._routes:
                self._query_order.append(query_id)
            self._routes[query_id] = route

    @property
    def entries(self) -> tuple[LedgerEntry, ...]:
        with self._lock:
            return tuple(self._entries)

    @property
    def per_backend(self) -> dict[str, BackendTotals]:
        with self._lock:
            return {
                name: BackendTotals(t.usage, t.cost_picodollars)
                for name, t in self._per_backend.items()
            }

    @property
    def per_query(self) -> list[tuple[str, str, float]]:
        """(query_id, route, cost in dollars) in first-recorded order."""
        with self._lock:
            costs: dict[str, int] = {qid: 0 for qid in self._query_order}
            for entry in self._entries:
                costs[entry.query_id] = costs.get(entry.query_id, 0) + entry.cost_picodollars
            return [
                (qid, self._routes.get(qid, ""), costs[qid] / PICO_PER_DOLLAR)
                for qid in self._query_order
            ]

    def query_cost_dollars(self, query_id: str) -> float:
        with self._lock:
            pico = sum(e.cost_picodollars for e in self._entries if e.query_id == query_id)
        return pico / PICO_PER_DOLLAR

    @property
    def total_picodollars(self) -> int:
        with self._lock:
            return sum(e.cost_picodollars for e in self._entries)

    @property
    def total_cost_dollars(self) -> float:
        return self.total_picodollars / PICO_PER_DOLLAR


def record_usage(
    ledger: CostLedger, query_id: str, backend: BackendSpec, usage: TokenUsage
) -> CostLedger:
    """Append one usage record; the ledger cost for the backend grows by
    (in * input_rate + out * output_rate) / 1e6 dollars, computed exactly."""
    return ledger.record(query_id, backend, usage)


def aggregate_usage(usages: Iterable[TokenUsage]) -> TokenUsage:
    total = TokenUsage()
    for u in usages:
        total = total + u
    return total
