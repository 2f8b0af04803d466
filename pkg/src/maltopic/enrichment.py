"""Agent 1: rewrite each free-text answer with the respondent's structured context."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .errors import EnrichmentError, EnrichmentRunError, MALTopicError, SchemaError, UnknownFieldError
from .llm import ChatExchange, Gateway, GenerationParams
from .prompts import DEFAULT_SURVEY_CONTEXT, render_enrichment
from .survey import FieldKind, SurveyDataset, SurveyRecord

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EnrichmentSpec:
    target_field: str
    context_fields: tuple[str, ...]
    survey_context: str = DEFAULT_SURVEY_CONTEXT

    def __post_init__(self):
        object.__setattr__(self, "context_fields", tuple(self.context_fields))
        if not self.context_fields:
            raise SchemaError("enrichment needs at least one context field")

    def check_against(self, dataset: SurveyDataset) -> None:
        target = dataset.field(self.target_field)
        if target is None:
            raise UnknownFieldError(f"target field {self.target_field!r} not in schema")
        if target.kind is not FieldKind.FREE_TEXT:
            raise SchemaError(f"target field {self.target_field!r} is not free text")
        for name in self.context_fields:
            f = dataset.field(name)
            if f is None:
                raise UnknownFieldError(f"context field {name!r} not in schema")
            if f.kind is not FieldKind.STRUCTURED:
                raise SchemaError(f"context field {name!r} is not structured")


@dataclass(frozen=True)
class EnrichedResponse:
    record_id: str
    original_text: str
    enriched_text: str
    context_snapshot: Mapping[str, str] = field(default_factory=dict)
    excluded: bool = False
    error: str | None = None
    exchange: ChatExchange | None = field(default=None, compare=False, repr=False)

    def to_dict(self) -> dict:
        out = {
            "record_id": self.record_id,
            "original_text": self.original_text,
            "enriched_text": self.enriched_text,
            "context_snapshot": dict(self.context_snapshot),
            "excluded": self.excluded,
        }
        if self.error is not None:
            out["error"] = self.error
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "EnrichedResponse":
        return cls(
            record_id=str(data["record_id"]),
            original_text=data["original_text"],
            enriched_text=data["enriched_text"],
            context_snapshot=dict(data.get("context_snapshot", {})),
            excluded=bool(data.get("excluded", False)),
            error=data.get("error"),
        )


def _context(record: SurveyRecord, spec: EnrichmentSpec) -> list[tuple[str, str]]:
    missing = [n for n in (spec.target_field, *spec.context_fields) if n not in record.values]
    if missing:
        raise UnknownFieldError(f"record {record.record_id!r} lacks fields {missing}")
    return [(name, record.values[name]) for name in spec.context_fields]


def build_enrichment_prompt(record: SurveyRecord, spec: EnrichmentSpec) -> str:
    context = _context(record, spec)
    return render_enrichment(spec.target_field, record.values[spec.target_field], context,
                             spec.survey_context)


def enrich_record(
    record: SurveyRecord,
    spec: EnrichmentSpec,
    gateway: Gateway,
    params: GenerationParams,
) -> EnrichedResponse:
    """Enrich one record. Blank answers are flagged ``excluded`` without an LLM call."""
    context = _context(record, spec)
    original = record.values[spec.target_field]
    snapshot = dict(context)
    if not original.strip():
        return EnrichedResponse(record.record_id, original, "", snapshot, excluded=True)

    prompt = build_enrichment_prompt(record, spec)
    try:
        exchange = gateway.generate(prompt, params)
    except MALTopicError as exc:
        raise EnrichmentError(record.record_id, exc) from exc
    text = exchange.response_text.strip()
    if not text:
        raise EnrichmentError(record.record_id, "model returned an empty enrichment")
    return EnrichedResponse(record.record_id, original, text, snapshot, exchange=exchange)


def enrich_dataset(
    dataset: SurveyDataset,
    spec: EnrichmentSpec,
    gateway: Gateway,
    params: GenerationParams,
    parallelism: int = 4,
    max_failure_fraction: float = 0.0,
) -> list[EnrichedResponse]:
    """Enrich every record independently, returning results in dataset order.

    Failed records come back excluded with their error message, as long as the
    share of failures stays within ``max_failure_fraction``; beyond that an
    EnrichmentRunError carrying every failure is raised.
    """
    spec.check_against(dataset)
    records: Sequence[SurveyRecord] = dataset.records
    if not records:
        return []

    def attempt(record):
        try:
            return enrich_record(record, spec, gateway, params)
        except EnrichmentError as exc:
            return exc

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        outcomes = list(pool.map(attempt, records))

    failures = [o for o in outcomes if isinstance(o, EnrichmentError)]
    if failures and len(failures) / len(records) > max_failure_fraction:
        raise EnrichmentRunError(failures, len(records))

    results = []
    for record, outcome in zip(records, outcomes):
        if isinstance(outcome, EnrichmentError):
            logger.warning("enrichment failed: %s", outcome)
            outcome = EnrichedResponse(
                record.record_id,
                record.values[spec.target_field],
                "",
                dict(_context(record, spec)),
                excluded=True,
                error=str(outcome.cause),
            )
        results.append(outcome)
    return results
