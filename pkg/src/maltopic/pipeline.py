"""End-to-end run: ingest, enrich, extract topics, deduplicate, score.

Every stage is written to the output directory before the next one starts;
rerunning against the same directory and configuration resumes from the
first missing stage file.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import platform
import shutil
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from . import __version__
from .dedup import DedupResult, dedup_llm
from .enrichment import EnrichedResponse, EnrichmentSpec, enrich_dataset
from .errors import ConfigError, RunLockedError, SchemaError, TopicsFileError
from .llm import (
    ChatExchange,
    CostModel,
    Gateway,
    GenerationParams,
    MockBackend,
    OpenAIChatBackend,
    TokenBudget,
)
from .metrics import (
    CoherenceConfig,
    CoverageConfig,
    Embedder,
    HashingEmbedder,
    MetricsReport,
    OpenAIEmbedder,
    TokenizedCorpus,
    evaluate,
    normalize_and_tokenize,
)
from .survey import FieldKind, FieldSchema, check_schema, load_dataset
from .text import resolve_stopwords
from .topics import Topic, TopicBatchResult, model_topics, topic_from_mapping

logger = logging.getLogger(__name__)

ENRICHED_FILE = "enriched.json"
BATCHES_FILE = "batches.json"
DEDUP_FILE = "dedup.json"
METRICS_FILE = "metrics.json"
COST_FILE = "cost.json"
MANIFEST_FILE = "manifest.json"
REPORT_FILE = "report.md"
EXCHANGES_DIR = "exchanges"
LOCK_FILE = ".lock"
STAGE_FILES = (ENRICHED_FILE, BATCHES_FILE, DEDUP_FILE, METRICS_FILE, COST_FILE, REPORT_FILE)
CORPUS_CHOICES = ("enriched", "original")


@dataclass(frozen=True)
class PipelineConfig:
    input_path: Path
    schema: tuple[FieldSchema, ...]
    enrichment: EnrichmentSpec
    params: GenerationParams = GenerationParams()
    budget: TokenBudget = TokenBudget()
    cost_model: CostModel = CostModel()
    coherence: CoherenceConfig = CoherenceConfig()
    coverage: CoverageConfig = CoverageConfig()
    cache_dir: str | None = None
    parallelism: int = 4
    corpus: str = "enriched"
    stopwords: str | tuple[str, ...] = "english"
    delimiter: str = ","
    max_failure_fraction: float = 0.0
    backend: Mapping[str, Any] = field(default_factory=lambda: {"kind": "mock"})
    embedder: Mapping[str, Any] = field(default_factory=lambda: {"kind": "hashing", "dimension": 256})

    def validate(self) -> None:
        try:
            check_schema(self.schema)
        except SchemaError as exc:
            raise ConfigError(str(exc)) from exc
        kinds = {f.name: f.kind for f in self.schema}
        spec = self.enrichment
        if kinds.get(spec.target_field) is not FieldKind.FREE_TEXT:
            raise ConfigError(f"target field {spec.target_field!r} must be a free_text schema field")
        for name in spec.context_fields:
            if kinds.get(name) is not FieldKind.STRUCTURED:
                raise ConfigError(f"context field {name!r} must be a structured schema field")
        if self.corpus not in CORPUS_CHOICES:
            raise ConfigError(f"corpus must be one of {CORPUS_CHOICES}")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be at least 1")
        if not 0 <= self.max_failure_fraction <= 1:
            raise ConfigError("max_failure_fraction must be in [0, 1]")

    def resolved_cache_dir(self, out_dir: Path) -> Path:
        return Path(self.cache_dir) if self.cache_dir else out_dir / "cache"

    def snapshot(self) -> dict:
        return {
            "input": str(self.input_path),
            "schema": [f.to_dict() for f in self.schema],
            "target_field": self.enrichment.target_field,
            "context_fields": list(self.enrichment.context_fields),
            "survey_context": self.enrichment.survey_context,
            "generation": asdict(self.params),
            "budget": asdict(self.budget),
            "cost": asdict(self.cost_model),
            "coherence": asdict(self.coherence),
            "coverage": asdict(self.coverage),
            "cache_dir": self.cache_dir,
            "parallelism": self.parallelism,
            "corpus": self.corpus,
            "stopwords": self.stopwords if isinstance(self.stopwords, str) else list(self.stopwords),
            "delimiter": self.delimiter,
            "max_failure_fraction": self.max_failure_fraction,
            "backend": dict(self.backend),
            "embedder": dict(self.embedder),
        }

    def fingerprint(self) -> str:
        # parallelism cannot change results, so it does not invalidate a resume
        snap = {k: v for k, v in self.snapshot().items() if k != "parallelism"}
        return hashlib.sha256(json.dumps(snap, sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], input_path: str | Path | None = None) -> "PipelineConfig":
        try:
            path = input_path or data.get("input")
            if not path:
                raise ConfigError("no input file given")
            stop = data.get("stopwords", "english")
            config = cls(
                input_path=Path(path),
                schema=tuple(FieldSchema.from_dict(f) for f in data["schema"]),
                enrichment=EnrichmentSpec(
                    data["target_field"],
                    tuple(data["context_fields"]),
                    **({"survey_context": data["survey_context"]} if "survey_context" in data else {}),
                ),
                params=GenerationParams(**data.get("generation", {})),
                budget=TokenBudget(**data.get("budget", {})),
                cost_model=CostModel(**data.get("cost", {})),
                coherence=CoherenceConfig(**data.get("coherence", {})),
                coverage=CoverageConfig(**data.get("coverage", {})),
                cache_dir=data.get("cache_dir"),
                parallelism=int(data.get("parallelism", 4)),
                corpus=data.get("corpus", "enriched"),
                stopwords=stop if isinstance(stop, str) or stop is None else tuple(stop),
                delimiter=data.get("delimiter", ","),
                max_failure_fraction=float(data.get("max_failure_fraction", 0.0)),
                backend=dict(data.get("backend", {"kind": "mock"})),
                embedder=dict(data.get("embedder", {"kind": "hashing", "dimension": 256})),
            )
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError, SchemaError) as exc:
            raise ConfigError(f"invalid configuration: {exc!r}") from exc
        config.validate()
        return config

    @classmethod
    def from_file(cls, path: str | Path, input_path: str | Path | None = None) -> "PipelineConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(data, input_path)


def build_gateway(config: PipelineConfig, out_dir: Path) -> Gateway:
    kind = config.backend.get("kind", "mock")
    if kind == "mock":
        backend = MockBackend()
    elif kind == "openai":
        opts = {k: v for k, v in config.backend.items() if k in ("base_url", "api_key_env", "timeout")}
        backend = OpenAIChatBackend(**opts)
    else:
        raise ConfigError(f"unknown backend kind {kind!r}")
    return Gateway(backend, config.budget, config.cost_model, cache_dir=config.resolved_cache_dir(out_dir))


def build_embedder(spec: Mapping[str, Any]) -> Embedder:
    kind = spec.get("kind", "hashing")
    if kind == "hashing":
        return HashingEmbedder(int(spec.get("dimension", 256)))
    if kind == "openai":
        opts = {k: v for k, v in spec.items() if k in ("model", "base_url", "api_key_env", "timeout")}
        return OpenAIEmbedder(**opts)
    raise ConfigError(f"unknown embedder kind {kind!r}")


@dataclass
class RunArtifacts:
    enriched: list[EnrichedResponse]
    batch_results: list[TopicBatchResult]
    dedup: DedupResult
    metrics: MetricsReport | None
    cost: dict
    manifest: dict
    warnings: list[str] = field(default_factory=list)

    @property
    def topics(self) -> tuple[Topic, ...]:
        return self.dedup.topics


def _dump(path: Path, data: Any) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(data, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _load(path: Path) -> Any:
    return json.loads(path.read_text(encoding="utf-8"))


def _exchange_record(x: ChatExchange) -> dict:
    # the cached flag is run-specific and lives in the manifest counters instead
    out = x.to_dict()
    out.pop("cached")
    return out


def _cost_summary(stage_exchanges: Mapping[str, Sequence[dict]]) -> dict:
    per_stage = {}
    for stage, xs in stage_exchanges.items():
        per_stage[stage] = {
            "exchanges": len(xs),
            "input_tokens": sum(x["input_tokens"] for x in xs),
            "output_tokens": sum(x["output_tokens"] for x in xs),
            "usd": math.fsum(x["cost_usd"] for x in xs),
        }
    return {
        "exchanges": sum(s["exchanges"] for s in per_stage.values()),
        "input_tokens": sum(s["input_tokens"] for s in per_stage.values()),
        "output_tokens": sum(s["output_tokens"] for s in per_stage.values()),
        "total_usd": math.fsum(x["cost_usd"] for xs in stage_exchanges.values() for x in xs),
        "per_stage": per_stage,
    }


class _RunLock:
    def __init__(self, out_dir: Path):
        self.path = out_dir / LOCK_FILE

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise RunLockedError(f"{self.path.parent} is in use by another run "
                                 f"(remove {self.path} if that run is dead)") from exc
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def build_corpus(enriched: Sequence[EnrichedResponse], choice: str, stopwords: Iterable[str]) -> TokenizedCorpus:
    live = [r for r in enriched if not r.excluded]
    attr = "enriched_text" if choice == "enriched" else "original_text"
    return normalize_and_tokenize([(r.record_id, getattr(r, attr)) for r in live], stopwords)


def run_pipeline(
    config: PipelineConfig,
    out_dir: str | Path,
    gateway: Gateway | None = None,
    embedder: Embedder | None = None,
    fresh: bool = False,
) -> RunArtifacts:
    """Run all stages, resuming from whatever a previous identical run left behind.

    ``fresh`` discards earlier stage files (the response cache is kept).
    """
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    gateway = gateway or build_gateway(config, out_dir)
    embedder = embedder or build_embedder(config.embedder)
    stopwords = resolve_stopwords(config.stopwords)

    with _RunLock(out_dir):
        return _run_locked(config, out_dir, gateway, embedder, stopwords, fresh)


def _run_locked(config, out_dir, gateway, embedder, stopwords, fresh) -> RunArtifacts:
    started, clock = _now(), time.perf_counter()
    calls_before = gateway.live_calls
    fingerprint = config.fingerprint()
    manifest_path = out_dir / MANIFEST_FILE
    previous = _load(manifest_path) if manifest_path.exists() else None
    if fresh or previous is None or previous.get("config_fingerprint") != fingerprint:
        for name in STAGE_FILES:
            (out_dir / name).unlink(missing_ok=True)
        shutil.rmtree(out_dir / EXCHANGES_DIR, ignore_errors=True)
    (out_dir / EXCHANGES_DIR).mkdir(exist_ok=True)

    manifest = {
        "tool": "maltopic",
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config_fingerprint": fingerprint,
        "config": config.snapshot(),
        "stages_completed": [],
        "stages_resumed": [],
        "started_at": started,
    }

    def write_manifest():
        _dump(manifest_path, manifest)

    write_manifest()
    warnings: list[str] = []
    exchanges: dict[str, list[dict]] = {}
    cache_hits = 0

    def stage(name: str, path: Path) -> bool:
        if path.exists():
            manifest["stages_resumed"].append(name)
            xpath = out_dir / EXCHANGES_DIR / f"{name}.json"
            exchanges[name] = _load(xpath) if xpath.exists() else []
            logger.info("stage %s: reusing %s", name, path.name)
            return False
        logger.info("stage %s: running", name)
        return True

    def finish(name: str, xs: Iterable[ChatExchange] = ()) -> None:
        nonlocal cache_hits
        xs = list(xs)
        cache_hits += sum(x.cached for x in xs)
        exchanges[name] = [_exchange_record(x) for x in xs]
        _dump(out_dir / EXCHANGES_DIR / f"{name}.json", exchanges[name])

    # ingest + Agent 1
    enriched_path = out_dir / ENRICHED_FILE
    if stage("enrich", enriched_path):
        dataset = load_dataset(config.input_path, config.schema, config.delimiter)
        enriched = enrich_dataset(dataset, config.enrichment, gateway, config.params,
                                  config.parallelism, config.max_failure_fraction)
        finish("enrich", (r.exchange for r in enriched if r.exchange is not None))
        _dump(enriched_path, [r.to_dict() for r in enriched])
    else:
        enriched = [EnrichedResponse.from_dict(d) for d in _load(enriched_path)]
    manifest["stages_completed"].append("enrich")
    manifest["records"] = len(enriched)
    manifest["excluded"] = sum(r.excluded for r in enriched)
    write_manifest()

    # Agent 2
    batches_path = out_dir / BATCHES_FILE
    if stage("topics", batches_path):
        batch_results = model_topics(enriched, config.budget, gateway, config.params, config.parallelism)
        finish("topics", (x for br in batch_results for x in br.exchanges))
        _dump(batches_path, [br.to_dict() for br in batch_results])
    else:
        batch_results = [TopicBatchResult.from_dict(d) for d in _load(batches_path)]
    manifest["stages_completed"].append("topics")
    manifest["batches"] = len(batch_results)
    write_manifest()

    # Agent 3
    dedup_path = out_dir / DEDUP_FILE
    if stage("dedup", dedup_path):
        dedup = dedup_llm(batch_results, gateway, config.params)
        finish("dedup", dedup.exchanges)
        _dump(dedup_path, dedup.to_dict())
    else:
        dedup = DedupResult.from_dict(_load(dedup_path))
    manifest["stages_completed"].append("dedup")
    manifest["topics"] = len(dedup.topics)
    write_manifest()

    # metrics
    metrics_path = out_dir / METRICS_FILE
    if stage("metrics", metrics_path):
        if dedup.topics:
            corpus = build_corpus(enriched, config.corpus, stopwords)
            metrics = evaluate(dedup.topics, corpus, embedder, config.coherence, config.coverage)
        else:
            metrics = None
        _dump(metrics_path, metrics.to_dict() if metrics else None)
    else:
        stored = _load(metrics_path)
        metrics = MetricsReport.from_dict(stored) if stored else None
    manifest["stages_completed"].append("metrics")

    if not enriched:
        warnings.append("dataset has no records")
    warnings += [f"dedup: {note}" for note in dedup.notes]
    if not dedup.topics:
        warnings.append("no topics produced; metrics skipped")
    cost = _cost_summary(exchanges)
    _dump(out_dir / COST_FILE, cost)
    for w in warnings:
        logger.warning(w)
    live_calls = gateway.live_calls - calls_before
    manifest.update({
        "warnings": warnings,
        "cost": cost,
        "run": {
            "live_calls": live_calls,
            "cache_hits": cache_hits,
            "finished_at": _now(),
            "elapsed_seconds": round(time.perf_counter() - clock, 3),
        },
    })
    artifacts = RunArtifacts(enriched, batch_results, dedup, metrics, cost, manifest, warnings)
    (out_dir / REPORT_FILE).write_text(render_report(artifacts), encoding="utf-8")
    write_manifest()
    return artifacts


def load_run(run_dir: str | Path) -> RunArtifacts:
    run_dir = Path(run_dir)
    try:
        manifest = _load(run_dir / MANIFEST_FILE)
        enriched = [EnrichedResponse.from_dict(d) for d in _load(run_dir / ENRICHED_FILE)]
        batches = [TopicBatchResult.from_dict(d) for d in _load(run_dir / BATCHES_FILE)]
        dedup = DedupResult.from_dict(_load(run_dir / DEDUP_FILE))
        stored = _load(run_dir / METRICS_FILE)
        cost = _load(run_dir / COST_FILE)
    except FileNotFoundError as exc:
        raise ConfigError(f"{run_dir} is not a completed run: {exc.filename} missing") from exc
    metrics = MetricsReport.from_dict(stored) if stored else None
    return RunArtifacts(enriched, batches, dedup, metrics, cost, manifest, list(manifest.get("warnings", [])))


# ---- evaluation of external topic sets -------------------------------------------------------

def load_topics_file(path: str | Path) -> list[Topic]:
    """Read topics from a JSON array (or an object with a ``topics`` array)."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise TopicsFileError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise TopicsFileError(f"{path}: invalid JSON ({exc})") from exc
    if isinstance(data, dict):
        data = data.get("topics")
    if not isinstance(data, list):
        raise TopicsFileError(f"{path}: expected a JSON array of topics")
    topics = []
    for i, entry in enumerate(data):
        try:
            topics.append(topic_from_mapping(entry))
        except Exception as exc:
            raise TopicsFileError(f"{path}: entry {i}: {exc}") from exc
    if not topics:
        raise TopicsFileError(f"{path}: no topics")
    return topics


def load_corpus_file(path: str | Path) -> list[tuple[str, str]]:
    """Read ``(doc_id, text)`` pairs.

    ``.json`` accepts an array of strings or of objects with an id
    (``record_id``/``id``) and text (``enriched_text``/``text``); excluded
    enrichment entries are skipped. ``.jsonl`` holds one such object per line.
    Anything else is plain text, one document per line, numbered from 1.
    """
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise TopicsFileError(f"cannot read corpus {path}: {exc}") from exc
    if path.suffix in (".json", ".jsonl"):
        try:
            items = json.loads(raw) if path.suffix == ".json" else [json.loads(l) for l in raw.splitlines() if l.strip()]
        except ValueError as exc:
            raise TopicsFileError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(items, list):
            raise TopicsFileError(f"{path}: expected a JSON array")
        docs = []
        for i, item in enumerate(items):
            if isinstance(item, str):
                docs.append((str(i), item))
            elif isinstance(item, dict):
                if item.get("excluded"):
                    continue
                doc_id = item.get("record_id", item.get("id", i))
                text = item.get("enriched_text", item.get("text"))
                if not isinstance(text, str):
                    raise TopicsFileError(f"{path}: entry {i}: no text field")
                docs.append((str(doc_id), text))
            else:
                raise TopicsFileError(f"{path}: entry {i}: expected a string or object")
        return docs
    return [(str(i), line) for i, line in enumerate(raw.splitlines(), start=1)]


def run_eval_only(
    topics_path: str | Path,
    corpus_path: str | Path,
    embedder: Embedder,
    coherence_config: CoherenceConfig = CoherenceConfig(),
    coverage_config: CoverageConfig = CoverageConfig(),
    stopwords: Iterable[str] = (),
) -> MetricsReport:
    topics = load_topics_file(topics_path)
    docs = load_corpus_file(corpus_path)
    if not docs:
        raise TopicsFileError(f"{corpus_path}: corpus is empty")
    corpus = normalize_and_tokenize(docs, stopwords)
    return evaluate(topics, corpus, embedder, coherence_config, coverage_config)


# ---- reporting -------------------------------------------------------------------------------

def _fmt(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def render_metrics_table(metrics: MetricsReport) -> list[str]:
    lines = [
        "| Metric | Value |",
        "|---|---|",
        f"| Word coherence (mean PMI, higher is better) | {_fmt(metrics.coherence)} |",
        f"| Word diversity (higher is better) | {_fmt(metrics.diversity)} |",
        f"| Average topic similarity (lower is better) | {_fmt(metrics.avg_similarity)} |",
        f"| Document coverage (higher is better) | {_fmt(metrics.coverage)} |",
    ]
    if metrics.flags:
        lines += ["", "Flags: " + ", ".join(metrics.flags)]
    return lines


def render_report(artifacts: RunArtifacts) -> str:
    config = artifacts.manifest.get("config", {})
    excluded = sum(r.excluded for r in artifacts.enriched)
    lines = [
        "# Topic modeling report",
        "",
        f"- Free-text field: {config.get('target_field', 'unknown')}",
        f"- Context fields: {', '.join(config.get('context_fields', []))}",
        f"- Responses: {len(artifacts.enriched)} ({excluded} excluded)",
        f"- Batches: {len(artifacts.batch_results)}",
        f"- Deduplication: {artifacts.dedup.method.value}",
        "",
    ]
    topics = artifacts.dedup.topics
    if not topics:
        lines += ["## Topics", "", "No topics were produced; metrics omitted.", ""]
    else:
        lines += [f"## Topics ({len(topics)})", ""]
        for i, t in enumerate(topics, start=1):
            lines += [
                f"### {i}. {t.name}",
                "",
                f"- Description: {t.description}",
                f"- Respondent profile: {t.respondent_profile}",
                f"- Representative words: {', '.join(t.representative_words)}",
                "",
            ]
        if artifacts.metrics is not None:
            lines += ["## Metrics", "", *render_metrics_table(artifacts.metrics), ""]
    cost = artifacts.cost
    lines += [
        "## Cost",
        "",
        f"- LLM exchanges: {cost.get('exchanges', 0)}",
        f"- Input tokens: {cost.get('input_tokens', 0)}",
        f"- Output tokens: {cost.get('output_tokens', 0)}",
        f"- Total: USD {cost.get('total_usd', 0.0):.6f}",
        "",
    ]
    if artifacts.warnings:
        lines += ["## Warnings", "", *[f"- {w}" for w in artifacts.warnings], ""]
    return "\n".join(lines)
