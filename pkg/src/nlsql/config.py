"""Application configuration.

Config lives in a TOML file (default ./nlsql.toml), overridable by
NLSQL_-prefixed environment variables and then by CLI flags (flags win).
Secrets never live in the file: the fallback API token comes only from
NLSQL_FALLBACK_TOKEN.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from .engine import RetrievalConfig
from .errors import ConfigurationError
from .gateway import BackendSpec, Pricing, Role, ScriptedFixtures
from .validate import SandboxLimits

ENV_PREFIX = "NLSQL_"
DEFAULT_CONFIG_NAME = "nlsql.toml"

_ROLE_KEYS = {
    "decomposer": Role.DECOMPOSER,
    "primary_generator": Role.PRIMARY_GENERATOR,
    "fallback_generator": Role.FALLBACK_GENERATOR,
    "embedder": Role.EMBEDDER,
}


@dataclass(frozen=True)
class EvalConfig:
    trials: int = 5
    workers: int = 1


@dataclass(frozen=True)
class AppConfig:
    databases_root: Path
    backends: dict[Role, BackendSpec]
    retrieval: RetrievalConfig = RetrievalConfig()
    sandbox: SandboxLimits = SandboxLimits()
    eval: EvalConfig = EvalConfig()
    strict_semantic: bool = False

    def __post_init__(self):
        missing = [role.value for role in Role if role not in self.backends]
        if missing:
            raise ConfigurationError(f"config must bind all roles; missing: {', '.join(missing)}")


def load_config(path: Path | str) -> AppConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid TOML: {exc}") from exc
    return parse_config(data, base_dir=path.parent)


def parse_config(data: Mapping, base_dir: Optional[Path] = None) -> AppConfig:
    base = base_dir or Path(".")
    try:
        root = data["databases_root"]
    except KeyError:
        raise ConfigurationError("config must set databases_root") from None
    databases_root = (base / root).resolve() if not Path(root).is_absolute() else Path(root)

    backends_data = data.get("backends")
    if not isinstance(backends_data, Mapping):
        raise ConfigurationError("config must define a [backends.<role>] table per role")
    backends: dict[Role, BackendSpec] = {}
    for key, role in _ROLE_KEYS.items():
        raw = backends_data.get(key)
        if raw is None:
            raise ConfigurationError(f"config missing backend for role {key!r}")
        backends[role] = _parse_backend(raw, role, base)

    retrieval_raw = data.get("retrieval", {})
    retrieval = RetrievalConfig(
        k=int(retrieval_raw.get("k", 10)),
        cosine_weight=float(retrieval_raw.get("cosine_weight", 0.7)),
        lexical_weight=float(retrieval_raw.get("lexical_weight", 0.3)),
        score_threshold=float(retrieval_raw.get("score_threshold", 0.2)),
        keep=int(retrieval_raw.get("keep", 5)),
        embed_dim=int(retrieval_raw.get("embed_dim", 64)),
    )
    sandbox_raw = data.get("sandbox", {})
    sandbox = SandboxLimits(
        timeout_s=float(sandbox_raw.get("timeout_s", 30.0)),
        max_rows=int(sandbox_raw.get("max_rows", 10_000)),
    )
    eval_raw = data.get("eval", {})
    eval_cfg = EvalConfig(
        trials=int(eval_raw.get("trials", 5)),
        workers=int(eval_raw.get("workers", 1)),
    )
    return AppConfig(
        databases_root=databases_root,
        backends=backends,
        retrieval=retrieval,
        sandbox=sandbox,
        eval=eval_cfg,
        strict_semantic=bool(data.get("strict_semantic", False)),
    )


def _parse_backend(raw: Mapping, role: Role, base: Path) -> BackendSpec:
    try:
        name = str(raw["name"])
        endpoint = str(raw["endpoint"])
    except KeyError as exc:
        raise ConfigurationError(f"backend for {role.value} missing field {exc}") from None
    fixtures_path = raw.get("fixtures")
    if fixtures_path is not None:
        fixtures_path = str(
            (base / fixtures_path) if not Path(fixtures_path).is_absolute() else fixtures_path
        )
    return BackendSpec(
        name=name,
        role=role,
        endpoint=endpoint,
        pricing=Pricing(
            float(raw.get("input_per_million", 0.0)),
            float(raw.get("output_per_million", 0.0)),
        ),
        timeout_s=float(raw.get("timeout_s", 60.0)),
        fixtures_path=fixtures_path,
    )


def serialize_config(config: AppConfig) -> str:
    """Emit the config as TOML; parse_config(serialize_config(c)) == c."""
    lines = [
        f'databases_root = "{config.databases_root.as_posix()}"',
        f"strict_semantic = {str(config.strict_semantic).lower()}",
        "",
        "[retrieval]",
        f"k = {config.retrieval.k}",
        f"cosine_weight = {config.retrieval.cosine_weight}",
        f"lexical_weight = {config.retrieval.lexical_weight}",
        f"score_threshold = {config.retrieval.score_threshold}",
        f"keep = {config.retrieval.keep}",
        f"embed_dim = {config.retrieval.embed_dim}",
        "",
        "[sandbox]",
        f"timeout_s = {config.sandbox.timeout_s}",
        f"max_rows = {config.sandbox.max_rows}",
        "",
        "[eval]",
        f"trials = {config.eval.trials}",
        f"workers = {config.eval.workers}",
    ]
    for key, role in _ROLE_KEYS.items():
        spec = config.backends[role]
        lines += [
            "",
            f"[backends.{key}]",
            f'name = "{spec.name}"',
            f'endpoint = "{spec.endpoint}"',
            f"input_per_million = {spec.pricing.input_per_million}",
            f"output_per_million = {spec.pricing.output_per_million}",
            f"timeout_s = {spec.timeout_s}",
        ]
        if spec.fixtures_path:
            lines.append(f'fixtures = "{Path(spec.fixtures_path).as_posix()}"')
    return "\n".join(lines) + "\n"


def apply_env_overrides(config: AppConfig, env: Mapping[str, str] = os.environ) -> AppConfig:
    updates = {}
    root = env.get(ENV_PREFIX + "DATABASES_ROOT")
    if root:
        updates["databases_root"] = Path(root)
    strict = env.get(ENV_PREFIX + "STRICT_SEMANTIC")
    if strict is not None:
        updates["strict_semantic"] = strict.strip().lower() in ("1", "true", "yes", "on")
    workers = env.get(ENV_PREFIX + "WORKERS")
    if workers:
        updates["eval"] = replace(config.eval, workers=int(workers))
    return replace(config, **updates) if updates else config


def materialize_backends(config: AppConfig) -> dict[Role, BackendSpec]:
    """Load scripted fixture files so the specs are ready to answer."""
    import json

    out = {}
    for role, spec in config.backends.items():
        # the scripted embedder is hash-seeded and needs no fixtures
        if spec.is_scripted and spec.fixtures is None and role is not Role.EMBEDDER:
            if not spec.fixtures_path:
                raise ConfigurationError(
                    f"scripted backend {spec.name!r} needs a fixtures file"
                )
            try:
                fixtures = json.loads(Path(spec.fixtures_path).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigurationError(
                    f"cannot load fixtures for {spec.name!r}: {exc}"
                ) from exc
            spec = replace(spec, fixtures=ScriptedFixtures(fixtures))
        out[role] = spec
    return out
