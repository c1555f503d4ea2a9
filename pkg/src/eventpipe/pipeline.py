"""Stage-wise pipeline execution: gate, triggers, arguments, final, score.

Each stage writes one JSONL artifact whose header line records the stage name
and the config hash. Under --resume a stage with a matching artifact is loaded
instead of recomputed; a hash mismatch aborts rather than silently mixing
runs. Artifacts carry no wall-clock data, so two identical runs produce
byte-identical stage files (timestamps live only in run.json).
"""
from __future__ import annotations

import json
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .config import (
    ConfigError,
    PipelineConfig,
    build_embedding_provider,
    build_llm_provider,
    build_verdict_provider,
)
from .evaluate import ScoreReport, score
from .extract import (
    RawStageOutput,
    TriggerPrediction,
    extract_arguments,
    extract_triggers,
    postprocess,
)
from .gate import (
    FileVerdictProvider,
    VerdictTriple,
    build_lexicon,
    learned_classify,
    llm_classify,
    rule_classify,
    vote,
)
from .llm import LlmProvider, ResponseCache
from .model import (
    DatasetError,
    EventMention,
    LabeledSegment,
    Segment,
    _parse_event,
    load_gold,
    load_ontology,
    load_transcripts,
)
from .prompts import PromptBundle
from .retrieval import FewShotExample, SupportIndex, build_index, load_index, save_index

__all__ = [
    "CountingEmbedder",
    "CountingLlm",
    "Pipeline",
    "ResumeError",
    "RunResult",
    "STAGE_ORDER",
    "read_artifact",
    "write_artifact",
]

STAGE_ORDER = ("gate", "triggers", "arguments", "final", "score")

ARTIFACT_NAMES = {
    "gate": "gate.jsonl",
    "triggers": "triggers.jsonl",
    "arguments": "arguments.jsonl",
    "final": "final.jsonl",
}


class ResumeError(ConfigError):
    """A resumed artifact does not belong to this configuration."""


def write_artifact(path: Path, stage: str, config_hash: str, rows: Sequence[dict]) -> None:
    """Write a stage artifact: self-describing header line, then sorted rows."""
    lines = [json.dumps({"stage": stage, "config_hash": config_hash}, sort_keys=True)]
    lines.extend(json.dumps(row, sort_keys=True, ensure_ascii=True) for row in rows)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_artifact(path: Path, stage: str, config_hash: str) -> list[dict] | None:
    """Load a stage artifact if present; raise ResumeError on a foreign header."""
    if not path.exists():
        return None
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ResumeError(f"{path}: empty artifact")
    header = json.loads(lines[0])
    if header.get("stage") != stage:
        raise ResumeError(f"{path}: artifact is for stage {header.get('stage')!r}, not {stage!r}")
    if header.get("config_hash") != config_hash:
        raise ResumeError(
            f"{path}: artifact config hash {header.get('config_hash')!r} does not match "
            f"this configuration ({config_hash!r}); delete the output directory or fix the config"
        )
    return [json.loads(line) for line in lines[1:] if line.strip()]


class CountingLlm(LlmProvider):
    """Wrapper that counts actual provider completions, labeled by stage."""

    def __init__(self, inner: LlmProvider):
        self.inner = inner
        self.counts: Counter = Counter()
        self._lock = threading.Lock()

    @property
    def provider_id(self) -> str:
        return self.inner.provider_id

    def complete(self, bundle: PromptBundle) -> str:
        with self._lock:
            self.counts[bundle.stage] += 1
        return self.inner.complete(bundle)


class CountingEmbedder:
    """Wrapper that counts texts sent to the embedding provider."""

    def __init__(self, inner):
        self.inner = inner
        self.texts_embedded = 0
        self._lock = threading.Lock()

    def embed_batch(self, texts):
        with self._lock:
            self.texts_embedded += len(texts)
        return self.inner.embed_batch(texts)


@dataclass
class RunResult:
    report: ScoreReport | None
    config_hash: str
    output_dir: Path
    provider_calls: dict = field(default_factory=dict)
    texts_embedded: int = 0
    gated_in: int = 0
    gated_out: int = 0
    trigger_failures: list[str] = field(default_factory=list)
    argument_degraded: list[str] = field(default_factory=list)
    formatting_attempts: int = 0
    resumed_stages: list[str] = field(default_factory=list)
    predictions_path: Path | None = None
    report_path: Path | None = None


def _event_obj(ev: EventMention) -> dict:
    return {
        "trigger": ev.trigger,
        "type": ev.event_type,
        "arguments": [{"name": a.name, "role": a.role} for a in ev.arguments],
    }


class Pipeline:
    """One configured run over one corpus, with stage-level resume."""

    def __init__(self, config: PipelineConfig, *, resume: bool = False):
        self.config = config
        self.resume = resume
        self.out_dir = Path(config.output_dir)
        self.config_hash = config.config_hash()
        self._providers: dict[str, CountingLlm] = {}
        self._embedder: CountingEmbedder | None = None
        self._index: SupportIndex | None = None
        self._cache: ResponseCache | None = None
        self._ontology = None
        self._support: list[LabeledSegment] | None = None
        self._result = RunResult(None, self.config_hash, self.out_dir)

    # --- lazy shared resources -------------------------------------------

    @property
    def ontology(self):
        if self._ontology is None:
            self._ontology = load_ontology(self.config.ontology)
        return self._ontology

    @property
    def support(self) -> list[LabeledSegment]:
        if self._support is None:
            self._support = load_gold(self.config.support, self.ontology)
        return self._support

    @property
    def cache(self) -> ResponseCache | None:
        if self._cache is None and self.config.cache:
            self._cache = ResponseCache(self.config.cache)
        return self._cache

    def llm_for(self, stage: str) -> CountingLlm:
        pcfg = self.config.llm_for_stage(stage)
        key = json.dumps(pcfg.to_dict(), sort_keys=True)
        if key not in self._providers:
            self._providers[key] = CountingLlm(build_llm_provider(pcfg))
        return self._providers[key]

    @property
    def embedder(self) -> CountingEmbedder:
        if self._embedder is None:
            self._embedder = CountingEmbedder(build_embedding_provider(self.config.embedding))
        return self._embedder

    def support_examples(self) -> list[FewShotExample]:
        from .model import normalize

        return [
            FewShotExample(
                example_id=ls.segment.id, text=ls.segment.text, gold_events=ls.gold_events
            )
            for ls in self.support
            if normalize(ls.segment.text)
        ]

    @property
    def index(self) -> SupportIndex | None:
        """Built (or loaded) on first use so fully resumed runs embed nothing."""
        if self.config.retrieval_k <= 0:
            return None
        if self._index is None:
            examples = self.support_examples()
            index_path = self.config.index
            if index_path and Path(index_path).exists():
                self._index = load_index(index_path, examples)
            else:
                self._index = build_index(examples, self.embedder)
                if index_path:
                    save_index(self._index, index_path)
        return self._index

    # --- stages -----------------------------------------------------------

    def _artifact(self, stage: str) -> Path:
        return self.out_dir / ARTIFACT_NAMES[stage]

    def _load_if_resuming(self, stage: str) -> list[dict] | None:
        if not self.resume:
            return None
        rows = read_artifact(self._artifact(stage), stage, self.config_hash)
        if rows is not None:
            self._result.resumed_stages.append(stage)
        return rows

    def _map(self, fn, items):
        if len(items) <= 1 or self.config.workers == 1:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
            return list(pool.map(fn, items))

    def run_gate(self, segments: list[Segment]) -> list[dict]:
        rows = self._load_if_resuming("gate")
        if rows is not None:
            return rows
        cfg = self.config
        lexicon = build_lexicon(self.support)
        learned_provider = build_verdict_provider(cfg.learned) if cfg.learned else None
        llm_file = FileVerdictProvider(cfg.gate_llm_file) if cfg.gate_llm_file else None
        presence_llm = None if llm_file is not None else self.llm_for("presence")
        policy = cfg.policy

        def classify(seg: Segment) -> dict:
            rule = rule_classify(seg, lexicon)
            learned = (
                learned_classify(seg, learned_provider, threshold=cfg.gate_threshold)
                if learned_provider is not None
                else False
            )
            if llm_file is not None:
                llm = llm_file.presence_probability(seg) >= 0.5
            else:
                llm = llm_classify(
                    seg,
                    presence_llm,
                    self.ontology,
                    cache=self.cache,
                    lenient=cfg.gate_lenient_llm,
                    templates_dir=cfg.templates,
                )
            triple = VerdictTriple(rule=rule, learned=learned, llm=llm)
            return {
                "id": seg.id,
                "rule": rule,
                "learned": learned,
                "llm": llm,
                "gated_in": vote(triple, policy),
            }

        rows = sorted(self._map(classify, segments), key=lambda r: r["id"])
        write_artifact(self._artifact("gate"), "gate", self.config_hash, rows)
        return rows

    def run_triggers(self, segments: list[Segment], gate_rows: list[dict]) -> list[dict]:
        rows = self._load_if_resuming("triggers")
        if rows is not None:
            return rows
        cfg = self.config
        by_id = {s.id: s for s in segments}
        gated_in = [by_id[r["id"]] for r in gate_rows if r["gated_in"]]
        provider = self.llm_for("trigger")
        index = self.index

        def work(seg: Segment) -> dict:
            result = extract_triggers(
                seg,
                index,
                self.ontology,
                provider,
                self.embedder if index is not None else None,
                k=cfg.retrieval_k,
                cache=self.cache,
                max_attempts=cfg.max_attempts,
                corrective=cfg.corrective,
                templates_dir=cfg.templates,
            )
            return {
                "id": result.segment_id,
                "predictions": [
                    {"trigger": p.trigger, "type": p.event_type} for p in result.predictions
                ],
                "raw": result.raw.raw_text,
                "attempts": result.raw.attempts,
                "failed": result.failed,
                "examples": list(result.example_ids),
            }

        rows = sorted(self._map(work, gated_in), key=lambda r: r["id"])
        write_artifact(self._artifact("triggers"), "triggers", self.config_hash, rows)
        return rows

    def run_arguments(self, segments: list[Segment], trigger_rows: list[dict]) -> list[dict]:
        rows = self._load_if_resuming("arguments")
        if rows is not None:
            return rows
        cfg = self.config
        by_id = {s.id: s for s in segments}
        inputs = [r for r in trigger_rows if r["predictions"] and not r["failed"]]
        provider = self.llm_for("argument")
        index = self.index

        def work(row: dict) -> dict:
            seg = by_id[row["id"]]
            triggers = [
                TriggerPrediction(row["id"], p["trigger"], p["type"]) for p in row["predictions"]
            ]
            result = extract_arguments(
                seg,
                triggers,
                index,
                self.ontology,
                provider,
                self.embedder if index is not None else None,
                k=cfg.retrieval_k,
                cache=self.cache,
                max_attempts=cfg.max_attempts,
                corrective=cfg.corrective,
                same_type_filter=cfg.same_type_filter,
                templates_dir=cfg.templates,
            )
            return {
                "id": result.segment_id,
                "events": [_event_obj(ev) for ev in result.events],
                "raw": result.raw.raw_text,
                "attempts": result.raw.attempts,
                "failed": result.failed,
                "examples": list(result.example_ids),
            }

        rows = sorted(self._map(work, inputs), key=lambda r: r["id"])
        write_artifact(self._artifact("arguments"), "arguments", self.config_hash, rows)
        return rows

    def run_final(
        self, segments: list[Segment], trigger_rows: list[dict], argument_rows: list[dict]
    ) -> list[dict]:
        rows = self._load_if_resuming("final")
        if rows is not None:
            return rows
        cfg = self.config
        raws = [
            RawStageOutput(r["id"], "argument", r["raw"], r["attempts"]) for r in argument_rows
        ]
        triggers_by_segment = {
            r["id"]: [TriggerPrediction(r["id"], p["trigger"], p["type"]) for p in r["predictions"]]
            for r in trigger_rows
            if r["predictions"] and not r["failed"]
        }
        report = postprocess(
            raws,
            self.ontology,
            self.llm_for("format"),
            triggers_by_segment=triggers_by_segment,
            cache=self.cache,
            max_attempts=cfg.max_attempts,
            templates_dir=cfg.templates,
        )
        self._result.argument_degraded = sorted(
            e.segment_id for e in report.entries if e.degraded
        )
        self._result.formatting_attempts = report.formatting_attempts
        events_by_id = report.events_by_segment()
        rows = [
            {
                "id": seg.id,
                "event": [_event_obj(ev) for ev in events_by_id.get(seg.id, ())],
            }
            for seg in sorted(segments, key=lambda s: s.id)
        ]
        write_artifact(self._artifact("final"), "final", self.config_hash, rows)
        return rows

    # --- orchestration ------------------------------------------------------

    def run(self, until: str = "score") -> RunResult:
        if until not in STAGE_ORDER:
            raise ConfigError(f"unknown stage {until!r}; expected one of {STAGE_ORDER}")
        cfg = self.config
        self.out_dir.mkdir(parents=True, exist_ok=True)
        transcripts = load_transcripts(cfg.transcripts)
        gold = load_gold(cfg.gold, self.ontology)
        gold_ids = {ls.segment.id for ls in gold}
        stray = sorted(s.id for s in transcripts if s.id not in gold_ids)
        if stray:
            raise DatasetError(f"transcript ids missing from gold: {stray[:5]}")
        segments = sorted(transcripts, key=lambda s: s.id)
        result = self._result
        started = time.time()

        gate_rows = self.run_gate(segments)
        result.gated_in = sum(1 for r in gate_rows if r["gated_in"])
        result.gated_out = len(gate_rows) - result.gated_in
        stop = STAGE_ORDER.index(until)
        if stop >= STAGE_ORDER.index("triggers"):
            trigger_rows = self.run_triggers(segments, gate_rows)
            result.trigger_failures = sorted(r["id"] for r in trigger_rows if r["failed"])
        if stop >= STAGE_ORDER.index("arguments"):
            argument_rows = self.run_arguments(segments, trigger_rows)
        if stop >= STAGE_ORDER.index("final"):
            final_rows = self.run_final(segments, trigger_rows, argument_rows)
            predictions_path = self.out_dir / "predictions.jsonl"
            predictions_path.write_text(
                "".join(json.dumps(row, sort_keys=True, ensure_ascii=True) + "\n" for row in final_rows),
                encoding="utf-8",
            )
            result.predictions_path = predictions_path
        if stop >= STAGE_ORDER.index("score"):
            predictions = {
                row["id"]: [_parse_event(obj, row["id"]) for obj in row["event"]]
                for row in final_rows
            }
            gold_by_id = {ls.segment.id: list(ls.gold_events) for ls in gold}
            result.report = score(
                predictions,
                gold_by_id,
                set_semantics=cfg.set_semantics,
                gated_out=result.gated_out,
                extraction_failed=len(result.trigger_failures),
            )
            report_path = self.out_dir / "report.json"
            report_path.write_text(
                json.dumps(result.report.to_dict(), sort_keys=True, indent=2) + "\n",
                encoding="utf-8",
            )
            result.report_path = report_path

        result.provider_calls = self._collect_calls()
        result.texts_embedded = self._embedder.texts_embedded if self._embedder else 0
        run_meta = {
            "config_hash": self.config_hash,
            "started_at": started,
            "finished_at": time.time(),
            "until": until,
            "resumed_stages": result.resumed_stages,
            "provider_calls": result.provider_calls,
            "texts_embedded": result.texts_embedded,
            "gated_in": result.gated_in,
            "gated_out": result.gated_out,
            "trigger_failures": result.trigger_failures,
            "argument_degraded": result.argument_degraded,
            "formatting_attempts": result.formatting_attempts,
            "score": result.report.to_dict() if result.report else None,
        }
        (self.out_dir / "run.json").write_text(
            json.dumps(run_meta, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
        return result

    def _collect_calls(self) -> dict:
        calls: Counter = Counter()
        for wrapper in self._providers.values():
            calls.update(wrapper.counts)
        out = {stage: calls[stage] for stage in sorted(calls)}
        out["total"] = sum(calls.values())
        return out
