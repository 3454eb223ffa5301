"""Schema context construction: catalog introspection, documentation
retrieval and evidence mappings.

Three channels feed the context handed to the downstream agents: the
database's own metadata, documentation segments ranked by embedding
similarity and re-ranked with a lexical blend, and term-to-value evidence
entries. Retrieval is an exact cosine scan over precomputed embeddings;
store sizes per database are small enough that exactness costs nothing and
keeps rankings reproducible.
"""

from __future__ import annotations

import hashlib
import json
import logging
import sqlite3
import struct
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ExtractionError
from .gateway import BackendSpec, Role
from .state import Question

logger = logging.getLogger(__name__)

CACHE_MAGIC = b"NLSQEMB1"
DEFAULT_EMBED_DIM = 64


# ---------------------------------------------------------------------------
# catalog


@dataclass(frozen=True)
class ColumnInfo:
    name: str
    declared_type: str
    nullable: bool


@dataclass(frozen=True)
class TableInfo:
    name: str
    columns: tuple[ColumnInfo, ...]


@dataclass(frozen=True)
class ForeignKey:
    from_table: str
    from_column: str
    to_table: str
    to_column: str


@dataclass(frozen=True)
class SchemaCatalog:
    tables: tuple[TableInfo, ...]
    primary_keys: dict[str, tuple[str, ...]]
    foreign_keys: tuple[ForeignKey, ...]

    def table(self, name: str) -> Optional[TableInfo]:
        lowered = name.lower()
        for t in self.tables:
            if t.name.lower() == lowered:
                return t
        return None

    def has_table(self, name: str) -> bool:
        return self.table(name) is not None

    def has_column(self, table: str, column: str) -> bool:
        t = self.table(table)
        if t is None:
            return False
        lowered = column.lower()
        return any(c.name.lower() == lowered for c in t.columns)

    def column_names(self, table: str) -> tuple[str, ...]:
        t = self.table(table)
        return tuple(c.name for c in t.columns) if t is not None else ()

    def all_column_owners(self, column: str) -> list[str]:
        lowered = column.lower()
        return [
            t.name
            for t in self.tables
            if any(c.name.lower() == lowered for c in t.columns)
        ]


def introspect_schema(db_path: Path | str) -> SchemaCatalog:
    """Read table, column, primary-key and foreign-key metadata.

    The catalog mirrors the database exactly: names keep their stored case,
    composite primary keys keep their declared column order.
    """
    path = Path(db_path)
    if not path.is_file():
        raise ExtractionError(f"database file not found: {path}")
    uri = f"file:{path}?mode=ro"
    try:
        conn = sqlite3.connect(uri, uri=True)
    except sqlite3.Error as exc:
        raise ExtractionError(f"cannot open database {path}: {exc}") from exc
    try:
        try:
            names = [
                r[0]
                for r in conn.execute(
                    "SELECT name FROM sqlite_master WHERE type='table' "
                    "AND name NOT LIKE 'sqlite_%' ORDER BY name"
                )
            ]
            tables: list[TableInfo] = []
            primary_keys: dict[str, tuple[str, ...]] = {}
            foreign_keys: list[ForeignKey] = []
            for name in names:
                cols: list[ColumnInfo] = []
                pk_cols: list[tuple[int, str]] = []
                for _, col_name, col_type, notnull, _, pk in conn.execute(
                    f'PRAGMA table_info("{name}")'
                ):
                    cols.append(ColumnInfo(col_name, col_type or "", not notnull))
                    if pk:
                        pk_cols.append((pk, col_name))
                tables.append(TableInfo(name, tuple(cols)))
                if pk_cols:
                    primary_keys[name] = tuple(c for _, c in sorted(pk_cols))
                for row in conn.execute(f'PRAGMA foreign_key_list("{name}")'):
                    # row: (id, seq, table, from, to, on_update, on_delete, match)
                    to_table, from_col, to_col = row[2], row[3], row[4]
                    if to_col is None:
                        # implicit reference to the target's primary key
                        target_pk = conn.execute(
                            f'PRAGMA table_info("{to_table}")'
                        ).fetchall()
                        pk_names = [r[1] for r in target_pk if r[5]]
                        to_col = pk_names[0] if pk_names else ""
                    foreign_keys.append(ForeignKey(name, from_col, to_table, to_col))
        except sqlite3.Error as exc:
            raise ExtractionError(f"cannot introspect database {path}: {exc}") from exc
    finally:
        conn.close()
    return SchemaCatalog(tuple(tables), primary_keys, tuple(foreign_keys))


def catalog_summary(catalog: SchemaCatalog) -> str:
    """Compact one-table-per-line rendering used in prompts."""
    lines = []
    for table in catalog.tables:
        pk = set(catalog.primary_keys.get(table.name, ()))
        cols = []
        for col in table.columns:
            part = f"{col.name} {col.declared_type}".strip()
            if col.name in pk:
                part += " PK"
            cols.append(part)
        lines.append(f"{table.name}({', '.join(cols)})")
    for fk in catalog.foreign_keys:
        lines.append(
            f"FK {fk.from_table}.{fk.from_column} -> {fk.to_table}.{fk.to_column}"
        )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# documentation segments and evidence


class SegmentKind(Enum):
    TABLE_MEANING = "table"
    COLUMN_DEFINITION = "column"
    BUSINESS_RULE = "rule"


@dataclass(frozen=True, eq=False)
class DocSegment:
    id: str
    text: str
    kind: SegmentKind
    embedding: np.ndarray  # fixed dimension, L2 norm > 0 for non-empty text


@dataclass(frozen=True)
class ScoredSegment:
    segment: DocSegment
    cosine: float
    score: float  # equals cosine after retrieval, blended score after re-rank


@dataclass(frozen=True)
class EvidenceEntry:
    nl_term: str
    table: str
    column: str
    db_value: str


@dataclass(frozen=True)
class EvidenceMap:
    entries: tuple[EvidenceEntry, ...] = ()

    @classmethod
    def empty(cls) -> "EvidenceMap":
        return cls(())

    def for_column(self, column: str, table: Optional[str] = None) -> list[EvidenceEntry]:
        column = column.lower()
        hits = [e for e in self.entries if e.column.lower() == column]
        if table is not None:
            wanted = table.lower()
            hits = [e for e in hits if e.table.lower() == wanted]
        return hits


@dataclass(frozen=True)
class SchemaContext:
    catalog: SchemaCatalog
    segments: tuple[ScoredSegment, ...]
    evidence: EvidenceMap
    retrieval_latency_s: float = 0.0


# ---------------------------------------------------------------------------
# embeddings


def embed(backend: BackendSpec, text: str, dim: int = DEFAULT_EMBED_DIM) -> np.ndarray:
    """Embed one string into a unit vector of the given dimension.

    The scripted embedder derives a pseudo-random unit vector from a hash of
    the text, so equal strings always embed identically and distinct strings
    are almost surely non-collinear.
    """
    if not text:
        raise ValueError("text must be non-empty")
    if backend.role is not Role.EMBEDDER:
        raise ValueError(f"backend role must be EMBEDDER, got {backend.role}")
    if backend.is_scripted:
        return hashed_unit_vector(text, dim)
    return _embed_http(backend, text, dim)


def hashed_unit_vector(text: str, dim: int) -> np.ndarray:
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    seed = int.from_bytes(digest[:8], "little")
    rng = np.random.default_rng(seed)
    vec = rng.standard_normal(dim)
    norm = float(np.linalg.norm(vec))
    return (vec / norm).astype(np.float32)


def _embed_http(backend: BackendSpec, text: str, dim: int) -> np.ndarray:
    import requests

    from .errors import ProtocolError, TransportError

    url = backend.endpoint.rstrip("/") + "/embeddings"
    try:
        resp = requests.post(
            url,
            json={"model": backend.name, "input": text},
            timeout=backend.timeout_s,
        )
    except requests.RequestException as exc:
        raise TransportError(f"embedder {backend.name!r} unreachable: {exc}") from exc
    if resp.status_code != 200:
        raise TransportError(f"embedder {backend.name!r} returned HTTP {resp.status_code}")
    try:
        vec = np.asarray(resp.json()["data"][0]["embedding"], dtype=np.float32)
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        raise ProtocolError(f"malformed embedding response: {exc}") from exc
    if vec.shape != (dim,):
        raise ProtocolError(f"embedder returned dimension {vec.shape}, expected ({dim},)")
    return vec


# ---------------------------------------------------------------------------
# vector store and retrieval


class VectorStore:
    """Immutable-after-build exact-scan store of segment embeddings."""

    def __init__(self, dim: int = DEFAULT_EMBED_DIM):
        self.dim = dim
        self._segments: list[DocSegment] = []
        self._matrix: Optional[np.ndarray] = None
        self._norms: Optional[np.ndarray] = None

    def add(self, segment: DocSegment) -> None:
        if segment.embedding.shape != (self.dim,):
            raise ValueError(
                f"segment {segment.id!r} has dimension {segment.embedding.shape}, "
                f"store expects ({self.dim},)"
            )
        if segment.text and float(np.linalg.norm(segment.embedding)) == 0.0:
            raise ValueError(f"segment {segment.id!r} has a zero embedding")
        self._segments.append(segment)
        self._matrix = None
        self._norms = None

    def __len__(self) -> int:
        return len(self._segments)

    @property
    def segments(self) -> tuple[DocSegment, ...]:
        return tuple(self._segments)

    def _ensure_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        if self._matrix is None:
            self._matrix = np.stack([s.embedding for s in self._segments]).astype(np.float64)
            self._norms = np.linalg.norm(self._matrix, axis=1)
        return self._matrix, self._norms  # type: ignore[return-value]

    def search(self, query_vec: np.ndarray, k: int) -> list[ScoredSegment]:
        if k < 1:
            raise ValueError("k must be >= 1")
        if not self._segments:
            return []
        matrix, norms = self._ensure_matrix()
        q = np.asarray(query_vec, dtype=np.float64)
        qnorm = float(np.linalg.norm(q))
        if qnorm == 0.0:
            raise ValueError("query vector must have non-zero norm")
        sims = (matrix @ q) / (norms * qnorm)
        ranked = sorted(
            (ScoredSegment(seg, float(sim), float(sim)) for seg, sim in zip(self._segments, sims)),
            key=lambda s: (-s.score, s.segment.id),
        )
        return ranked[:k]


def retrieve(store: VectorStore, query_vec: np.ndarray, k: int) -> list[ScoredSegment]:
    """Top-k segments by cosine similarity, descending, ties by id ascending."""
    return store.search(query_vec, k)


def rerank_filter(
    segments: Sequence[ScoredSegment],
    query_text: str,
    *,
    cosine_weight: float = 0.7,
    lexical_weight: float = 0.3,
    score_threshold: float = 0.2,
    keep: int = 5,
) -> list[ScoredSegment]:
    """Blend cosine similarity with lexical word overlap and filter.

    final = cosine_weight * cosine + lexical_weight * jaccard(words, words);
    anything under score_threshold is dropped, the survivors are re-sorted
    descending (ties by id) and truncated to ``keep``. Idempotent because the
    stored cosine, not the blended score, feeds the recomputation.
    """
    query_words = _words(query_text)
    rescored = []
    for scored in segments:
        overlap = _jaccard(query_words, _words(scored.segment.text))
        final = cosine_weight * scored.cosine + lexical_weight * overlap
        if final < score_threshold:
            continue
        rescored.append(replace(scored, score=final))
    rescored.sort(key=lambda s: (-s.score, s.segment.id))
    return rescored[:keep]


def _words(text: str) -> frozenset[str]:
    out = []
    current = []
    for ch in text.lower():
        if ch.isalnum():
            current.append(ch)
        elif current:
            out.append("".join(current))
            current = []
    if current:
        out.append("".join(current))
    return frozenset(out)


def _jaccard(a: frozenset[str], b: frozenset[str]) -> float:
    if not a and not b:
        return 0.0
    union = len(a | b)
    return len(a & b) / union if union else 0.0


def build_context(
    catalog: SchemaCatalog,
    segments: Sequence[ScoredSegment],
    evidence: EvidenceMap,
    question: Question,
    retrieval_latency_s: float = 0.0,
) -> SchemaContext:
    """Assemble the context, dropping evidence rows that point at schema
    objects the catalog does not contain (logged, not fatal)."""
    kept = []
    for entry in evidence.entries:
        if not catalog.has_column(entry.table, entry.column):
            logger.warning(
                "dropping evidence entry %r: %s.%s not in catalog for %s",
                entry.nl_term,
                entry.table,
                entry.column,
                question.db_id,
            )
            continue
        kept.append(entry)
    return SchemaContext(
        catalog=catalog,
        segments=tuple(segments),
        evidence=EvidenceMap(tuple(kept)),
        retrieval_latency_s=retrieval_latency_s,
    )


# ---------------------------------------------------------------------------
# file formats


def load_doc_records(path: Path | str) -> list[dict]:
    """Read ``<db_id>.docs.jsonl``: one {"id", "kind", "text"} per line."""
    path = Path(path)
    if not path.is_file():
        raise ExtractionError(f"documentation file not found: {path}")
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                records.append(
                    {"id": str(rec["id"]), "kind": str(rec["kind"]), "text": str(rec["text"])}
                )
            except (json.JSONDecodeError, KeyError) as exc:
                raise ExtractionError(f"{path}:{lineno}: bad docs record: {exc}") from exc
    return records


def load_evidence(path: Path | str) -> EvidenceMap:
    """Read ``<db_id>.evidence.jsonl``; a missing file is an empty map."""
    path = Path(path)
    if not path.is_file():
        return EvidenceMap.empty()
    entries = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                entries.append(
                    EvidenceEntry(
                        nl_term=str(rec["nl_term"]),
                        table=str(rec["table"]),
                        column=str(rec["column"]),
                        db_value=str(rec["db_value"]),
                    )
                )
            except (json.JSONDecodeError, KeyError) as exc:
                raise ExtractionError(f"{path}:{lineno}: bad evidence record: {exc}") from exc
    return EvidenceMap(tuple(entries))


def segment_kind(raw: str) -> SegmentKind:
    try:
        return SegmentKind(raw)
    except ValueError as exc:
        raise ExtractionError(f"unknown segment kind {raw!r}") from exc


def write_embedding_cache(path: Path | str, ids: Sequence[str], matrix: np.ndarray) -> None:
    """Binary cache layout: magic "NLSQEMB1", uint32 dim, uint32 count,
    count*dim little-endian float32 values, then per id a uint32 length
    prefix followed by UTF-8 bytes."""
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    count, dim = matrix.shape
    if count != len(ids):
        raise ValueError("ids and matrix row count differ")
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<II", dim, count))
        fh.write(matrix.tobytes())
        for seg_id in ids:
            encoded = seg_id.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)


def read_embedding_cache(path: Path | str) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    with path.open("rb") as fh:
        magic = fh.read(len(CACHE_MAGIC))
        if magic != CACHE_MAGIC:
            raise ExtractionError(f"{path}: not an embedding cache (bad magic {magic!r})")
        dim, count = struct.unpack("<II", fh.read(8))
        payload = fh.read(4 * dim * count)
        if len(payload) != 4 * dim * count:
            raise ExtractionError(f"{path}: truncated embedding block")
        matrix = np.frombuffer(payload, dtype="<f4").reshape(count, dim).copy()
        ids = []
        for _ in range(count):
            raw_len = fh.read(4)
            if len(raw_len) != 4:
                raise ExtractionError(f"{path}: truncated id block")
            (length,) = struct.unpack("<I", raw_len)
            ids.append(fh.read(length).decode("utf-8"))
    return ids, matrix


def build_store(
    records: Iterable[dict],
    embedder: BackendSpec,
    dim: int = DEFAULT_EMBED_DIM,
    cached: Optional[tuple[Sequence[str], np.ndarray]] = None,
) -> VectorStore:
    """Build a store from doc records, reusing cached vectors by segment id
    and embedding anything the cache does not cover."""
    by_id = {}
    if cached is not None:
        ids, matrix = cached
        by_id = {seg_id: matrix[i] for i, seg_id in enumerate(ids)}
    store = VectorStore(dim)
    for rec in records:
        vec = by_id.get(rec["id"])
        if vec is None:
            vec = embed(embedder, rec["text"], dim)
        store.add(
            DocSegment(
                id=rec["id"],
                text=rec["text"],
                kind=segment_kind(rec["kind"]),
                embedding=np.asarray(vec, dtype=np.float32),
            )
        )
    return store
