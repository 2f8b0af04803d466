"""Agent 2: pack enriched responses into budget-sized batches and extract topics per batch."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from .enrichment import EnrichedResponse
from .errors import (
    InvalidTopicError,
    MALTopicError,
    TopicExtractionError,
    TopicParseError,
    UnparseableAfterRetryError,
    UnsplittableResponseError,
)
from .llm import ChatExchange, Gateway, GenerationParams, TokenBudget, estimate_tokens
from .prompts import REPAIR_REMINDER, numbered_line, render_topic_prompt

logger = logging.getLogger(__name__)

# Accepted spellings for each field, checked in order.
FIELD_ALIASES = {
    "name": ("name", "topic_name", "Topic Name", "topic name", "topic"),
    "description": ("description", "Description"),
    "respondent_profile": ("respondent_profile", "Respondent Profile", "respondent profile",
                           "profile"),
    "representative_words": ("representative_words", "Representative words",
                             "Representative Words", "representative words", "words"),
}


@dataclass(frozen=True)
class Topic:
    name: str
    description: str
    respondent_profile: str
    representative_words: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "representative_words", tuple(self.representative_words))
        if not self.name.strip():
            raise InvalidTopicError("topic name is empty")
        if not self.representative_words:
            raise InvalidTopicError(f"topic {self.name!r} has no representative words")
        seen = set()
        for word in self.representative_words:
            key = word.strip().lower()
            if not key:
                raise InvalidTopicError(f"topic {self.name!r} has an empty representative word")
            if key in seen:
                raise InvalidTopicError(f"topic {self.name!r} repeats word {word!r}")
            seen.add(key)

    @property
    def canonical_text(self) -> str:
        """Name, description and words joined by single spaces; what gets embedded."""
        return " ".join([self.name, self.description, *self.representative_words])

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "description": self.description,
            "respondent_profile": self.respondent_profile,
            "representative_words": list(self.representative_words),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Topic":
        return topic_from_mapping(data)


def name_key(name: str) -> str:
    return " ".join(name.lower().split())


def _lookup(data: Mapping[str, Any], key: str):
    for alias in FIELD_ALIASES[key]:
        if alias in data:
            return data[alias]
    raise InvalidTopicError(f"topic entry missing field {key!r}")


def topic_from_mapping(data: Mapping[str, Any]) -> Topic:
    """Build a Topic from one decoded JSON object, cleaning up the word list.

    Words may arrive as a list or a comma-separated string; blanks and
    case-insensitive repeats are dropped. All four fields must be non-empty.
    """
    if not isinstance(data, Mapping):
        raise InvalidTopicError(f"topic entry is not an object: {data!r}")
    values = {key: _lookup(data, key) for key in FIELD_ALIASES}
    for key in ("name", "description", "respondent_profile"):
        if not isinstance(values[key], str) or not values[key].strip():
            raise InvalidTopicError(f"topic field {key!r} must be a non-empty string")
    words = values["representative_words"]
    if isinstance(words, str):
        words = words.split(",")
    if not isinstance(words, (list, tuple)) or not all(isinstance(w, str) for w in words):
        raise InvalidTopicError("representative_words must be a list of strings")
    cleaned: dict[str, str] = {}
    for w in words:
        w = w.strip()
        if w:
            cleaned.setdefault(w.lower(), w)
    return Topic(values["name"].strip(), values["description"].strip(),
                 values["respondent_profile"].strip(), tuple(cleaned.values()))


def extract_json_array(text: str) -> list:
    """Return the first well-formed JSON array embedded in ``text``."""
    decoder = json.JSONDecoder()
    start = text.find("[")
    while start != -1:
        try:
            value, _ = decoder.raw_decode(text, start)
        except json.JSONDecodeError:
            pass
        else:
            if isinstance(value, list):
                return value
        start = text.find("[", start + 1)
    raise TopicParseError("no JSON array found in model output")


def parse_topics(response_text: str) -> list[Topic]:
    entries = extract_json_array(response_text)
    # an array of scalars (e.g. a word list inside prose) is not a topic list
    if entries and not any(isinstance(e, Mapping) for e in entries):
        raise TopicParseError("first JSON array holds no topic objects")
    topics = [topic_from_mapping(e) for e in entries]
    seen = set()
    for t in topics:
        if name_key(t.name) in seen:
            raise InvalidTopicError(f"duplicate topic name {t.name!r}")
        seen.add(name_key(t.name))
    if not topics:
        raise TopicParseError("model returned an empty topic list")
    return topics


@dataclass(frozen=True)
class TopicBatchResult:
    batch_index: int
    record_ids: tuple[str, ...]
    topics: tuple[Topic, ...]
    attempts: int = 1
    exchanges: tuple[ChatExchange, ...] = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "record_ids", tuple(self.record_ids))
        object.__setattr__(self, "topics", tuple(self.topics))

    def to_dict(self) -> dict:
        return {
            "batch_index": self.batch_index,
            "record_ids": list(self.record_ids),
            "attempts": self.attempts,
            "topics": [t.to_dict() for t in self.topics],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "TopicBatchResult":
        return cls(
            batch_index=int(data["batch_index"]),
            record_ids=tuple(data["record_ids"]),
            topics=tuple(Topic.from_dict(t) for t in data["topics"]),
            attempts=int(data.get("attempts", 1)),
        )


def item_overhead_tokens(count: int) -> int:
    """Upper bound on the tokens the ``[i] `` prefix and newline add per response."""
    return estimate_tokens(numbered_line(max(count, 1), "") + "\n") + 1


def prompt_overhead_tokens() -> int:
    """Tokens of the topic prompt without responses, repair reminder included."""
    return estimate_tokens(render_topic_prompt([]) + REPAIR_REMINDER) + 1


def partition_into_batches(
    responses: Sequence[EnrichedResponse],
    budget: TokenBudget,
    prompt_overhead_tokens: int = 0,
    per_item_overhead_tokens: int = 0,
) -> list[list[EnrichedResponse]]:
    """Sequential greedy packing under ``budget.effective_input_tokens``.

    Excluded responses are dropped. A batch is closed as soon as the next
    response would push it over budget, so input order is kept both within
    and across batches.
    """
    limit = budget.effective_input_tokens
    batches: list[list[EnrichedResponse]] = []
    current: list[EnrichedResponse] = []
    used = prompt_overhead_tokens
    for resp in responses:
        if resp.excluded:
            continue
        cost = estimate_tokens(resp.enriched_text) + per_item_overhead_tokens
        if prompt_overhead_tokens + cost > limit:
            raise UnsplittableResponseError(resp.record_id, prompt_overhead_tokens + cost, limit)
        if current and used + cost > limit:
            batches.append(current)
            current, used = [], prompt_overhead_tokens
        current.append(resp)
        used += cost
    if current:
        batches.append(current)
    return batches


def build_topic_prompt(batch: Sequence[EnrichedResponse]) -> str:
    if not batch:
        raise ValueError("cannot build a topic prompt for an empty batch")
    return render_topic_prompt([r.enriched_text for r in batch])


def extract_topics(
    batch: Sequence[EnrichedResponse],
    gateway: Gateway,
    params: GenerationParams,
    batch_index: int = 0,
) -> TopicBatchResult:
    prompt = build_topic_prompt(batch)
    exchanges = []
    error: TopicParseError | None = None
    for attempt in (1, 2):
        text = prompt if attempt == 1 else prompt + REPAIR_REMINDER
        exchange = gateway.generate(text, params)
        exchanges.append(exchange)
        try:
            topics = parse_topics(exchange.response_text)
        except TopicParseError as exc:
            logger.warning("batch %d attempt %d: %s", batch_index, attempt, exc)
            error = exc
            continue
        return TopicBatchResult(batch_index, tuple(r.record_id for r in batch), tuple(topics),
                                attempts=attempt, exchanges=tuple(exchanges))
    raise UnparseableAfterRetryError(batch_index, error)


def model_topics(
    responses: Sequence[EnrichedResponse],
    budget: TokenBudget,
    gateway: Gateway,
    params: GenerationParams,
    parallelism: int = 4,
) -> list[TopicBatchResult]:
    live = [r for r in responses if not r.excluded]
    batches = partition_into_batches(
        live, budget,
        prompt_overhead_tokens=prompt_overhead_tokens(),
        per_item_overhead_tokens=item_overhead_tokens(len(live)),
    )
    if not batches:
        return []

    def run(indexed):
        index, batch = indexed
        try:
            return extract_topics(batch, gateway, params, batch_index=index)
        except MALTopicError as exc:
            return exc

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        outcomes = list(pool.map(run, enumerate(batches)))
    errors = {i: o for i, o in enumerate(outcomes) if isinstance(o, Exception)}
    if errors:
        raise TopicExtractionError(errors)
    return outcomes
