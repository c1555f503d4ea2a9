"""Run configuration: a single JSON file, strictly validated, stably hashable.

Unknown keys are rejected everywhere so a typo cannot silently fall back to a
default. API keys never live in the config, only the names of environment
variables that hold them.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .gate import VotePolicy

__all__ = [
    "ConfigError",
    "PipelineConfig",
    "ProviderConfig",
    "build_embedding_provider",
    "build_llm_provider",
    "build_verdict_provider",
]

PROVIDER_KINDS = ("remote", "mock", "file")
LLM_STAGES = ("presence", "trigger", "argument", "format")


class ConfigError(ValueError):
    """The configuration file is malformed or inconsistent."""


def _take(mapping: dict, allowed: tuple[str, ...], where: str) -> None:
    if not isinstance(mapping, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = sorted(set(mapping) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")


@dataclass(frozen=True)
class ProviderConfig:
    """One provider endpoint: remote HTTP, scripted mock, or precomputed file."""

    kind: str
    endpoint: str = ""
    model: str = ""
    api_key_env: str | None = None
    timeout: float = 60.0
    max_retries: int = 3
    max_in_flight: int = 4
    min_interval: float = 0.0
    sampling: dict = field(default_factory=dict)
    batch_size: int = 64
    script: str = ""
    name: str = "mock"
    dimension: int = 384
    path: str = ""

    def __post_init__(self):
        if self.kind not in PROVIDER_KINDS:
            raise ConfigError(f"provider kind must be one of {PROVIDER_KINDS}, got {self.kind!r}")

    @classmethod
    def from_dict(cls, data: dict, where: str) -> "ProviderConfig":
        _take(
            data,
            (
                "kind",
                "endpoint",
                "model",
                "api_key_env",
                "timeout",
                "max_retries",
                "max_in_flight",
                "min_interval",
                "sampling",
                "batch_size",
                "script",
                "name",
                "dimension",
                "path",
            ),
            where,
        )
        if "kind" not in data:
            raise ConfigError(f"{where}: provider needs a 'kind'")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f"{where}: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "endpoint": self.endpoint,
            "model": self.model,
            "api_key_env": self.api_key_env,
            "timeout": self.timeout,
            "max_retries": self.max_retries,
            "max_in_flight": self.max_in_flight,
            "min_interval": self.min_interval,
            "sampling": self.sampling,
            "batch_size": self.batch_size,
            "script": self.script,
            "name": self.name,
            "dimension": self.dimension,
            "path": self.path,
        }


def _provider_or_none(data, where: str) -> ProviderConfig | None:
    if data is None:
        return None
    return ProviderConfig.from_dict(data, where)


@dataclass(frozen=True)
class PipelineConfig:
    gold: str
    transcripts: str
    support: str
    output_dir: str
    ontology: str | None = None
    templates: str | None = None
    cache: str | None = None
    index: str | None = None
    gate_policy: str = "all"
    gate_threshold: float = 0.5
    gate_lenient_llm: bool = False
    learned: ProviderConfig | None = None
    gate_llm_file: str | None = None
    retrieval_k: int = 10
    embedding: ProviderConfig = field(default_factory=lambda: ProviderConfig(kind="mock"))
    same_type_filter: bool = False
    llm_default: ProviderConfig = field(default_factory=lambda: ProviderConfig(kind="mock"))
    llm_overrides: dict = field(default_factory=dict)
    max_attempts: int = 3
    corrective: bool = False
    workers: int = 4
    set_semantics: bool = False

    def __post_init__(self):
        VotePolicy.parse(self.gate_policy)  # raises GateError on a bad name
        if self.retrieval_k < 0:
            raise ConfigError(f"retrieval k must be >= 0, got {self.retrieval_k}")
        if self.max_attempts < 1:
            raise ConfigError(f"retry max_attempts must be >= 1, got {self.max_attempts}")
        if self.workers < 1:
            raise ConfigError(f"concurrency workers must be >= 1, got {self.workers}")
        if not 0.0 <= self.gate_threshold <= 1.0:
            raise ConfigError(f"gate threshold must be in [0, 1], got {self.gate_threshold}")
        for stage in self.llm_overrides:
            if stage not in LLM_STAGES:
                raise ConfigError(f"llm override for unknown stage {stage!r}")

    @property
    def policy(self) -> VotePolicy:
        return VotePolicy.parse(self.gate_policy)

    def llm_for_stage(self, stage: str) -> ProviderConfig:
        return self.llm_overrides.get(stage, self.llm_default)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        _take(
            data,
            ("paths", "gate", "retrieval", "llm", "retry", "concurrency", "scoring"),
            "config",
        )
        paths = data.get("paths", {})
        _take(
            paths,
            ("gold", "transcripts", "support", "output_dir", "ontology", "templates", "cache", "index"),
            "config.paths",
        )
        for required in ("gold", "transcripts", "support", "output_dir"):
            if not paths.get(required):
                raise ConfigError(f"config.paths.{required} is required")
        gate = data.get("gate", {})
        _take(gate, ("policy", "threshold", "lenient_llm", "learned", "llm_file"), "config.gate")
        retrieval = data.get("retrieval", {})
        _take(retrieval, ("k", "embedding", "same_type_filter"), "config.retrieval")
        llm = data.get("llm", {})
        _take(llm, ("default",) + LLM_STAGES, "config.llm")
        if not llm.get("default"):
            raise ConfigError("config.llm.default is required")
        retry = data.get("retry", {})
        _take(retry, ("max_attempts", "corrective"), "config.retry")
        concurrency = data.get("concurrency", {})
        _take(concurrency, ("workers",), "config.concurrency")
        scoring = data.get("scoring", {})
        _take(scoring, ("set_semantics",), "config.scoring")
        overrides = {
            stage: ProviderConfig.from_dict(llm[stage], f"config.llm.{stage}")
            for stage in LLM_STAGES
            if llm.get(stage) is not None
        }
        embedding = retrieval.get("embedding")
        return cls(
            gold=paths["gold"],
            transcripts=paths["transcripts"],
            support=paths["support"],
            output_dir=paths["output_dir"],
            ontology=paths.get("ontology"),
            templates=paths.get("templates"),
            cache=paths.get("cache"),
            index=paths.get("index"),
            gate_policy=gate.get("policy", "all"),
            gate_threshold=gate.get("threshold", 0.5),
            gate_lenient_llm=bool(gate.get("lenient_llm", False)),
            learned=_provider_or_none(gate.get("learned"), "config.gate.learned"),
            gate_llm_file=gate.get("llm_file"),
            retrieval_k=int(retrieval.get("k", 10)),
            embedding=(
                ProviderConfig.from_dict(embedding, "config.retrieval.embedding")
                if embedding is not None
                else ProviderConfig(kind="mock")
            ),
            same_type_filter=bool(retrieval.get("same_type_filter", False)),
            llm_default=ProviderConfig.from_dict(llm["default"], "config.llm.default"),
            llm_overrides=overrides,
            max_attempts=int(retry.get("max_attempts", 3)),
            corrective=bool(retry.get("corrective", False)),
            workers=int(concurrency.get("workers", 4)),
            set_semantics=bool(scoring.get("set_semantics", False)),
        )

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {
            "paths": {
                "gold": self.gold,
                "transcripts": self.transcripts,
                "support": self.support,
                "output_dir": self.output_dir,
                "ontology": self.ontology,
                "templates": self.templates,
                "cache": self.cache,
                "index": self.index,
            },
            "gate": {
                "policy": self.gate_policy,
                "threshold": self.gate_threshold,
                "lenient_llm": self.gate_lenient_llm,
                "learned": self.learned.to_dict() if self.learned else None,
                "llm_file": self.gate_llm_file,
            },
            "retrieval": {
                "k": self.retrieval_k,
                "embedding": self.embedding.to_dict(),
                "same_type_filter": self.same_type_filter,
            },
            "llm": {
                "default": self.llm_default.to_dict(),
                **{stage: cfg.to_dict() for stage, cfg in sorted(self.llm_overrides.items())},
            },
            "retry": {"max_attempts": self.max_attempts, "corrective": self.corrective},
            "concurrency": {"workers": self.workers},
            "scoring": {"set_semantics": self.set_semantics},
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=True)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def build_llm_provider(cfg: ProviderConfig):
    """Instantiate a chat provider from its config."""
    from .llm import HttpLlmProvider, ScriptedMockLlm

    if cfg.kind == "mock":
        if not cfg.script:
            raise ConfigError("mock llm provider needs a 'script' path")
        return ScriptedMockLlm.from_script_file(cfg.script, provider_name=cfg.name)
    if cfg.kind == "remote":
        if not cfg.endpoint or not cfg.model:
            raise ConfigError("remote llm provider needs 'endpoint' and 'model'")
        return HttpLlmProvider(
            cfg.endpoint,
            cfg.model,
            api_key_env=cfg.api_key_env,
            timeout=cfg.timeout,
            max_retries=cfg.max_retries,
            max_in_flight=cfg.max_in_flight,
            min_interval=cfg.min_interval,
            sampling=cfg.sampling,
        )
    raise ConfigError(f"llm provider kind {cfg.kind!r} is not usable for completion")


def build_embedding_provider(cfg: ProviderConfig):
    """Instantiate an embedding provider from its config."""
    from .retrieval import HashedBagEmbedder, HttpEmbeddingProvider

    if cfg.kind == "mock":
        return HashedBagEmbedder(dimension=cfg.dimension)
    if cfg.kind == "remote":
        if not cfg.endpoint:
            raise ConfigError("remote embedding provider needs an 'endpoint'")
        return HttpEmbeddingProvider(
            cfg.endpoint,
            timeout=cfg.timeout,
            max_retries=cfg.max_retries,
            batch_size=cfg.batch_size,
        )
    raise ConfigError(f"embedding provider kind {cfg.kind!r} is not usable")


def build_verdict_provider(cfg: ProviderConfig):
    """Instantiate a learned-classifier verdict source from its config."""
    from .gate import FileVerdictProvider, HttpVerdictProvider

    if cfg.kind == "file":
        if not cfg.path:
            raise ConfigError("file verdict provider needs a 'path'")
        return FileVerdictProvider(cfg.path)
    if cfg.kind == "remote":
        if not cfg.endpoint:
            raise ConfigError("remote verdict provider needs an 'endpoint'")
        return HttpVerdictProvider(cfg.endpoint, timeout=cfg.timeout, max_retries=cfg.max_retries)
    raise ConfigError(f"verdict provider kind {cfg.kind!r} is not usable")
