"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations


class MALTopicError(Exception):
    """Base class for all package errors."""


# ingestion
class DatasetError(MALTopicError):
    pass


class MissingColumnError(DatasetError):
    pass


class MalformedRowError(DatasetError):
    pass


class DuplicateIdError(DatasetError):
    pass


class DatasetIOError(DatasetError):
    pass


class SchemaError(DatasetError):
    pass


# llm gateway
class GatewayError(MALTopicError):
    pass


class OverBudgetError(GatewayError):
    def __init__(self, estimated: int, limit: int):
        super().__init__(f"prompt needs ~{estimated} tokens, limit is {limit}")
        self.estimated = estimated
        self.limit = limit


class TransportError(GatewayError):
    """Network-level failure; retried by the gateway."""


class ProviderError(GatewayError):
    """Non-success status from the provider; 429 and 5xx are marked retriable."""

    def __init__(self, status: int, body: str, retriable: bool = False):
        super().__init__(f"provider returned HTTP {status}: {body[:500]}")
        self.status = status
        self.body = body
        self.retriable = retriable


# agents
class EnrichmentError(MALTopicError):
    def __init__(self, record_id: str, cause: BaseException | str):
        super().__init__(f"record {record_id!r}: {cause}")
        self.record_id = record_id
        self.cause = cause


class EnrichmentRunError(MALTopicError):
    def __init__(self, failures: list[EnrichmentError], total: int):
        super().__init__(f"{len(failures)} of {total} enrichments failed")
        self.failures = failures
        self.total = total


class UnknownFieldError(MALTopicError):
    pass


class TopicParseError(MALTopicError):
    """The LLM output contained no usable JSON array of topics."""


class InvalidTopicError(TopicParseError):
    """A topic entry was found but breaks the topic schema."""


class UnparseableAfterRetryError(MALTopicError):
    def __init__(self, batch_index: int, last_error: Exception):
        super().__init__(f"batch {batch_index}: unparseable after repair retry ({last_error})")
        self.batch_index = batch_index
        self.last_error = last_error


class UnsplittableResponseError(MALTopicError):
    def __init__(self, record_id: str, tokens: int, budget: int):
        super().__init__(f"response {record_id!r} needs {tokens} tokens, batch budget is {budget}")
        self.record_id = record_id
        self.tokens = tokens
        self.budget = budget


class TopicExtractionError(MALTopicError):
    def __init__(self, errors: dict[int, Exception]):
        detail = "; ".join(f"batch {i}: {e}" for i, e in sorted(errors.items()))
        super().__init__(f"{len(errors)} batch(es) failed: {detail}")
        self.errors = errors


# metrics
class MetricError(MALTopicError):
    pass


class EmptyCorpusError(MetricError):
    pass


class NoWordsError(MetricError):
    pass


class DimensionMismatchError(MetricError):
    pass


class ZeroVectorError(MetricError):
    pass


class TooFewTopicsError(MetricError):
    pass


class EmptyTopicsError(MetricError):
    pass


# pipeline
class ConfigError(MALTopicError):
    pass


class TopicsFileError(MALTopicError):
    pass


class RunLockedError(MALTopicError):
    pass
