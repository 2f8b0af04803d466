"""Agent 3: merge per-batch topic lists into one deduplicated list."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

from .errors import MALTopicError, TopicParseError
from .llm import ChatExchange, Gateway, GenerationParams, estimate_tokens
from .prompts import REPAIR_REMINDER, render_dedup_prompt
from .topics import Topic, TopicBatchResult, extract_json_array, name_key, topic_from_mapping

logger = logging.getLogger(__name__)

Provenance = dict[str, list[tuple[int, str]]]


class DedupMethod(str, Enum):
    LLM = "llm"
    DETERMINISTIC = "deterministic"
    SKIPPED = "skipped"


@dataclass(frozen=True)
class DedupResult:
    topics: tuple[Topic, ...]
    provenance: Mapping[str, list[tuple[int, str]]]
    method: DedupMethod
    exchanges: tuple[ChatExchange, ...] = field(default=(), compare=False, repr=False)
    notes: tuple[str, ...] = field(default=(), compare=False)

    def to_dict(self) -> dict:
        return {
            "method": self.method.value,
            "topics": [t.to_dict() for t in self.topics],
            "provenance": {name: [[i, src] for i, src in entries]
                           for name, entries in self.provenance.items()},
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "DedupResult":
        return cls(
            topics=tuple(Topic.from_dict(t) for t in data["topics"]),
            provenance={name: [(int(i), src) for i, src in entries]
                        for name, entries in data["provenance"].items()},
            method=DedupMethod(data["method"]),
            notes=tuple(data.get("notes", ())),
        )


def as_batch(result: DedupResult, batch_index: int = 0, record_ids: Sequence[str] = ("merged",)) -> TopicBatchResult:
    """Wrap a dedup result so it can be fed back in as a single batch."""
    return TopicBatchResult(batch_index, tuple(record_ids), result.topics)


def _skipped(batch_results: Sequence[TopicBatchResult]) -> DedupResult:
    topics, provenance = [], {}
    for br in batch_results:
        for t in br.topics:
            topics.append(t)
            provenance.setdefault(t.name, []).append((br.batch_index, t.name))
    return DedupResult(tuple(topics), provenance, DedupMethod.SKIPPED)


def dedup_deterministic(batch_results: Sequence[TopicBatchResult]) -> DedupResult:
    """Group topics by normalized name; the earliest occurrence wins.

    Representative words of a group are unioned in first-seen order
    (case-insensitive); description and profile come from the winner.
    """
    ordered = sorted(enumerate(batch_results), key=lambda p: (p[1].batch_index, p[0]))
    groups: dict[str, list[tuple[int, Topic]]] = {}
    for _, br in ordered:
        for t in br.topics:
            groups.setdefault(name_key(t.name), []).append((br.batch_index, t))

    topics, provenance = [], {}
    for members in groups.values():
        first = members[0][1]
        words: dict[str, str] = {}
        for _, t in members:
            for w in t.representative_words:
                words.setdefault(w.strip().lower(), w)
        topics.append(Topic(first.name, first.description, first.respondent_profile,
                            tuple(words.values())))
        provenance[first.name] = [(idx, t.name) for idx, t in members]
    return DedupResult(tuple(topics), provenance, DedupMethod.DETERMINISTIC)


class _Unmatched(MALTopicError):
    pass


def _parse_merged(text: str, batch_results: Sequence[TopicBatchResult]) -> tuple[list[Topic], Provenance]:
    entries = extract_json_array(text)
    if not entries:
        raise TopicParseError("empty merged topic list")
    index: dict[str, list[tuple[int, str]]] = {}
    for br in batch_results:
        for t in br.topics:
            index.setdefault(name_key(t.name), []).append((br.batch_index, t.name))

    topics, provenance, seen = [], {}, set()
    for entry in entries:
        topic = topic_from_mapping(entry)
        sources = entry.get("source_topics") if isinstance(entry, Mapping) else None
        if not isinstance(sources, list) or not sources:
            raise TopicParseError(f"merged topic {topic.name!r} lists no source_topics")
        if name_key(topic.name) in seen:
            raise _Unmatched(f"merged topic name {topic.name!r} repeated")
        seen.add(name_key(topic.name))
        refs: list[tuple[int, str]] = []
        for src in sources:
            matches = index.get(name_key(str(src)))
            if not matches:
                raise _Unmatched(f"source topic {src!r} matches no input topic")
            refs.extend(m for m in matches if m not in refs)
        topics.append(topic)
        provenance[topic.name] = refs
    return topics, provenance


def _llm_pass(batch_results, gateway, params) -> DedupResult:
    payload = [(br.batch_index, [t.to_dict() for t in br.topics]) for br in batch_results]
    prompt = render_dedup_prompt(payload)
    exchanges: list[ChatExchange] = []
    for attempt in (1, 2):
        exchange = gateway.generate(prompt if attempt == 1 else prompt + REPAIR_REMINDER, params)
        exchanges.append(exchange)
        try:
            topics, provenance = _parse_merged(exchange.response_text, batch_results)
        except _Unmatched as exc:
            logger.warning("dedup output rejected (%s); using deterministic merge", exc)
            return _fallback(batch_results, exchanges, f"unmatched source: {exc}")
        except TopicParseError as exc:
            logger.warning("dedup attempt %d unparseable: %s", attempt, exc)
            continue
        if len(topics) > sum(len(br.topics) for br in batch_results):
            return _fallback(batch_results, exchanges, "merged list larger than its input")
        return DedupResult(tuple(topics), provenance, DedupMethod.LLM, tuple(exchanges))
    return _fallback(batch_results, exchanges, "unparseable after repair retry")


def _fallback(batch_results, exchanges, note) -> DedupResult:
    result = dedup_deterministic(batch_results)
    return DedupResult(result.topics, result.provenance, result.method, tuple(exchanges), (note,))


def _fits(batch_results, gateway) -> bool:
    payload = [(br.batch_index, [t.to_dict() for t in br.topics]) for br in batch_results]
    prompt = render_dedup_prompt(payload) + REPAIR_REMINDER
    return estimate_tokens(prompt) <= gateway.budget.effective_input_tokens


def _compose(merged: DedupResult, parts: Sequence[DedupResult]) -> Provenance:
    # merged provenance points at synthetic batches (index = position in parts);
    # translate it back to the original batch references
    out: Provenance = {}
    for name, refs in merged.provenance.items():
        resolved: list[tuple[int, str]] = []
        for part_index, src_name in refs:
            for ref in parts[part_index].provenance.get(src_name, []):
                if ref not in resolved:
                    resolved.append(ref)
        out[name] = resolved
    return out


def dedup_llm(
    batch_results: Sequence[TopicBatchResult],
    gateway: Gateway,
    params: GenerationParams,
) -> DedupResult:
    """Merge batch topic lists with the model, falling back to dedup_deterministic.

    A single batch passes through untouched. When all topic lists together
    exceed the input budget, halves are merged recursively and the two
    merged lists are then merged with each other.
    """
    if len(batch_results) <= 1:
        return _skipped(batch_results)
    if _fits(batch_results, gateway):
        return _llm_pass(batch_results, gateway, params)
    if len(batch_results) == 2:
        return _fallback(batch_results, (), "topic lists exceed the input budget")

    mid = len(batch_results) // 2
    parts = [dedup_llm(batch_results[:mid], gateway, params),
             dedup_llm(batch_results[mid:], gateway, params)]
    synthetic = [as_batch(p, i) for i, p in enumerate(parts)]
    if _fits(synthetic, gateway):
        merged = _llm_pass(synthetic, gateway, params)
    else:
        merged = _fallback(synthetic, (), "merged halves exceed the input budget")
    methods = {p.method for p in parts} | {merged.method}
    method = DedupMethod.LLM if methods <= {DedupMethod.LLM, DedupMethod.SKIPPED} else DedupMethod.DETERMINISTIC
    return DedupResult(
        merged.topics,
        _compose(merged, parts),
        method,
        tuple(x for p in (*parts, merged) for x in p.exchanges),
        tuple(n for p in (*parts, merged) for n in p.notes),
    )
