"""Shared fixtures: a small schools/satscores database, its documentation
and evidence files, and scripted backends for deterministic pipeline runs."""

from __future__ import annotations

import json
import sqlite3
from pathlib import Path

import pytest

from nlsql.engine import PipelineEngine, RetrievalConfig
from nlsql.gateway import BackendSpec, CostLedger, Pricing, Role, scripted_backend
from nlsql.schema import introspect_schema, load_evidence
from nlsql.state import DatabaseRegistry
from nlsql.validate import SandboxLimits

DB_ID = "schools_db"

SCHOOLS_ROWS = [
    ("c01", "Alpha Charter", "Y", 1),
    ("c02", "Beta Charter", "Y", 1),
    ("c03", "Gamma Public", "N", 2),
    ("c04", "Delta Charter", "Y", 2),
    ("c05", "Epsilon Public", "N", 1),
]

SATSCORES_ROWS = [
    ("c01", 80, 100),
    ("c02", 20, 100),
    ("c03", 50, 100),
    ("c04", 60, 100),
    ("c05", 10, 100),
]

DISTRICT_ROWS = [
    (1, "North", "east Bohemia"),
    (2, "South", "west Bohemia"),
]

DOC_SEGMENTS = [
    {"id": "seg-schools", "kind": "table", "text": "schools lists every school with its charter flag and district"},
    {"id": "seg-satscores", "kind": "table", "text": "satscores holds SAT score counts per school"},
    {"id": "seg-district", "kind": "table", "text": "district maps schools to named regions"},
    {"id": "seg-charter", "kind": "column", "text": "schools.charter is Y when the school is a charter school"},
    {"id": "seg-sname", "kind": "column", "text": "schools.sname stores the school name"},
    {"id": "seg-excellence", "kind": "rule", "text": "SAT excellence rate is numge1500 divided by numtsttakr from satscores"},
]

EVIDENCE_RECORDS = [
    {"nl_term": "charter schools", "table": "schools", "column": "charter", "db_value": "Y"},
    {"nl_term": "East Bohemia", "table": "district", "column": "region", "db_value": "east Bohemia"},
]


def build_schools_db(path: Path) -> None:
    conn = sqlite3.connect(path)
    try:
        conn.executescript(
            """
            CREATE TABLE schools (
                cdscode TEXT PRIMARY KEY,
                sname TEXT,
                charter TEXT,
                district_id INTEGER
            );
            CREATE TABLE satscores (
                cds TEXT PRIMARY KEY REFERENCES schools(cdscode),
                numge1500 INTEGER,
                numtsttakr INTEGER
            );
            CREATE TABLE district (
                id INTEGER PRIMARY KEY,
                name TEXT,
                region TEXT
            );
            """
        )
        conn.executemany("INSERT INTO schools VALUES (?,?,?,?)", SCHOOLS_ROWS)
        conn.executemany("INSERT INTO satscores VALUES (?,?,?)", SATSCORES_ROWS)
        conn.executemany("INSERT INTO district VALUES (?,?,?)", DISTRICT_ROWS)
        conn.commit()
    finally:
        conn.close()


def write_docs(db_dir: Path, db_id: str = DB_ID) -> Path:
    path = db_dir / f"{db_id}.docs.jsonl"
    path.write_text(
        "\n".join(json.dumps(rec) for rec in DOC_SEGMENTS) + "\n", encoding="utf-8"
    )
    return path


def write_evidence(db_dir: Path, db_id: str = DB_ID) -> Path:
    path = db_dir / f"{db_id}.evidence.jsonl"
    path.write_text(
        "\n".join(json.dumps(rec) for rec in EVIDENCE_RECORDS) + "\n", encoding="utf-8"
    )
    return path


@pytest.fixture
def db_root(tmp_path: Path) -> Path:
    root = tmp_path / "databases"
    db_dir = root / DB_ID
    db_dir.mkdir(parents=True)
    build_schools_db(db_dir / f"{DB_ID}.sqlite")
    write_docs(db_dir)
    write_evidence(db_dir)
    return root


@pytest.fixture
def registry(db_root: Path) -> DatabaseRegistry:
    return DatabaseRegistry(db_root)


@pytest.fixture
def db_path(registry: DatabaseRegistry) -> Path:
    return registry.database_path(DB_ID)


@pytest.fixture
def catalog(db_path: Path):
    return introspect_schema(db_path)


@pytest.fixture
def evidence(registry: DatabaseRegistry):
    return load_evidence(registry.evidence_path(DB_ID))


@pytest.fixture
def embedder() -> BackendSpec:
    return BackendSpec(name="test-embedder", role=Role.EMBEDDER, endpoint="scripted")


# ---------------------------------------------------------------------------
# plan fixtures


COUNT_PLAN = """ENTITIES
schools\tschools\tcount target
CONDITIONS
STEPS
s1\tcount all schools\t-
OUTPUT
columns\tCOUNT(*)
"""

NAMES_PLAN = """ENTITIES
school names\tschools.sname\toutput column
CONDITIONS
STEPS
s1\tproject school names\t-
OUTPUT
columns\tschools.sname
"""

CHARTER_PLAN = """ENTITIES
charter schools\tschools.charter = 'Y'\tcharter flag filter
school names\tschools.sname\toutput column
SAT excellence rate\tsatscores.numge1500 / satscores.numtsttakr\tcomputed ratio
CONDITIONS
over the average\texcellence rate greater than the overall average\tsubquery
STEPS
s1\tcompute the average SAT excellence rate that defines over the average\t-
s2\tkeep charter schools whose rate is over the average\ts1
s3\tproject school names\ts2
OUTPUT
columns\tschools.sname
"""


def fenced(text: str, lang: str = "") -> str:
    return f"```{lang}\n{text}\n```"


def make_backends(
    decomposer_fixtures: dict,
    primary_fixtures: dict,
    fallback_fixtures: dict | None = None,
    fallback_pricing: Pricing | None = None,
) -> dict[Role, BackendSpec]:
    fallback_fixtures = fallback_fixtures or {"unused-fallback-key": "SELECT 1"}
    return {
        Role.DECOMPOSER: scripted_backend(
            decomposer_fixtures, name="test-decomposer", role=Role.DECOMPOSER
        ),
        Role.PRIMARY_GENERATOR: scripted_backend(
            primary_fixtures, name="test-primary", role=Role.PRIMARY_GENERATOR
        ),
        Role.FALLBACK_GENERATOR: scripted_backend(
            fallback_fixtures,
            name="test-fallback",
            role=Role.FALLBACK_GENERATOR,
            pricing=fallback_pricing or Pricing(2.50, 10.0),
        ),
        Role.EMBEDDER: BackendSpec(
            name="test-embedder", role=Role.EMBEDDER, endpoint="scripted"
        ),
    }


def make_engine(
    registry: DatabaseRegistry,
    decomposer_fixtures: dict,
    primary_fixtures: dict,
    fallback_fixtures: dict | None = None,
    **kwargs,
) -> PipelineEngine:
    kwargs.setdefault("limits", SandboxLimits(timeout_s=10.0, max_rows=10_000))
    kwargs.setdefault("retrieval", RetrievalConfig())
    kwargs.setdefault("ledger", CostLedger())
    return PipelineEngine(
        registry=registry,
        backends=make_backends(decomposer_fixtures, primary_fixtures, fallback_fixtures),
        **kwargs,
    )
