"""Topic quality metrics: PMI word coherence, word diversity, average
inter-topic cosine similarity and document coverage."""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DimensionMismatchError,
    EmptyCorpusError,
    EmptyTopicsError,
    MetricError,
    NoWordsError,
    TooFewTopicsError,
    ZeroVectorError,
)
from .text import normalize_text
from .topics import Topic


@dataclass(frozen=True)
class Document:
    doc_id: str
    normalized_text: str
    tokens: tuple[str, ...]


@dataclass(frozen=True)
class TokenizedCorpus:
    documents: tuple[Document, ...]
    token_doc_frequency: Mapping[str, int]

    def __len__(self) -> int:
        return len(self.documents)


def normalize_and_tokenize(raw_texts: Iterable[tuple[str, str]], stopwords: Iterable[str] = ()) -> TokenizedCorpus:
    """Normalize each text and split it into tokens.

    Stopwords are dropped from the token lists only; ``normalized_text``
    keeps them so phrase matching sees the text as written.
    """
    stop = frozenset(stopwords)
    docs = []
    df: dict[str, int] = {}
    for doc_id, raw in raw_texts:
        norm = normalize_text(raw)
        tokens = tuple(t for t in norm.split() if t not in stop)
        docs.append(Document(str(doc_id), norm, tokens))
        for tok in set(tokens):
            df[tok] = df.get(tok, 0) + 1
    return TokenizedCorpus(tuple(docs), df)


def phrase_occurs(phrase: str, document: Document) -> bool:
    """True if the normalized phrase appears in the document on token boundaries."""
    needle = normalize_text(phrase)
    if not needle:
        return False
    return f" {needle} " in f" {document.normalized_text} "


@dataclass(frozen=True)
class CoherenceConfig:
    smoothing_epsilon: float = 1e-12

    def __post_init__(self):
        if not self.smoothing_epsilon > 0:
            raise ValueError("smoothing_epsilon must be positive")


@dataclass(frozen=True)
class CoverageConfig:
    theta: float = 0.1

    def __post_init__(self):
        if not 0 <= self.theta <= 1:
            raise ValueError("theta must be in [0, 1]")


def pmi(p_i: float, p_j: float, p_ij: float, eps: float) -> float:
    return math.log((p_ij + eps) / ((p_i + eps) * (p_j + eps)))


@dataclass(frozen=True)
class CoherenceResult:
    overall: float
    per_topic: dict[str, float]
    flagged: tuple[str, ...] = ()


def coherence(topics: Sequence[Topic], corpus: TokenizedCorpus,
              config: CoherenceConfig = CoherenceConfig()) -> CoherenceResult:
    """Mean PMI over all distinct word pairs of each topic, averaged over topics.

    Probabilities are document-frequency fractions; a pair co-occurs when both
    phrases appear in the same document. Topics with fewer than two distinct
    words score 0 and are listed in ``flagged``.
    """
    n_docs = len(corpus.documents)
    if n_docs == 0:
        raise EmptyCorpusError("coherence needs at least one document")
    eps = config.smoothing_epsilon

    occurrence: dict[str, frozenset[int]] = {}

    def docs_with(word: str) -> frozenset[int]:
        key = normalize_text(word)
        if key not in occurrence:
            occurrence[key] = frozenset(i for i, d in enumerate(corpus.documents) if phrase_occurs(key, d))
        return occurrence[key]

    per_topic: dict[str, float] = {}
    flagged = []
    for topic in topics:
        words = list(dict.fromkeys(w for w in (normalize_text(w) for w in topic.representative_words) if w))
        if len(words) < 2:
            per_topic[topic.name] = 0.0
            flagged.append(topic.name)
            continue
        scores = []
        for a, b in combinations(words, 2):
            da, db = docs_with(a), docs_with(b)
            scores.append(pmi(len(da) / n_docs, len(db) / n_docs, len(da & db) / n_docs, eps))
        per_topic[topic.name] = math.fsum(scores) / len(scores)
    overall = math.fsum(per_topic.values()) / len(per_topic) if per_topic else 0.0
    return CoherenceResult(overall, per_topic, tuple(flagged))


def diversity(topics: Sequence[Topic]) -> float:
    """Unique representative words (case-insensitive) over total words."""
    words = [w.strip().lower() for t in topics for w in t.representative_words]
    if not words:
        raise NoWordsError("diversity needs at least one representative word")
    return len(set(words)) / len(words)


def as_vector(values) -> np.ndarray:
    vec = np.asarray(values, dtype=float)
    if vec.ndim != 1 or vec.size == 0:
        raise MetricError("embedding must be a non-empty 1-D vector")
    if not np.all(np.isfinite(vec)):
        raise MetricError("embedding has non-finite components")
    return vec


def cosine(u, v) -> float:
    u, v = as_vector(u), as_vector(v)
    if u.shape != v.shape:
        raise DimensionMismatchError(f"dimensions differ: {u.size} vs {v.size}")
    nu, nv = float(np.linalg.norm(u)), float(np.linalg.norm(v))
    if nu == 0 or nv == 0:
        raise ZeroVectorError("cosine undefined for a zero vector")
    return float(np.dot(u, v)) / (nu * nv)


class Embedder(Protocol):
    def embed(self, texts: Sequence[str]) -> np.ndarray:
        """Return one row per text, all of the same dimension."""


class HashingEmbedder:
    """Bag-of-words counts of normalized tokens hashed into a fixed number of buckets."""

    def __init__(self, dimension: int = 256):
        if dimension <= 0:
            raise ValueError("dimension must be positive")
        self.dimension = dimension

    def bucket(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "big") % self.dimension

    def embed(self, texts):
        out = np.zeros((len(texts), self.dimension))
        for row, text in enumerate(texts):
            for tok in normalize_text(text).split():
                out[row, self.bucket(tok)] += 1.0
        return out


class OpenAIEmbedder:
    """Embeddings from an OpenAI-compatible ``/embeddings`` endpoint."""

    def __init__(self, model: str = "text-embedding-3-small", base_url: str = "https://api.openai.com/v1",
                 api_key_env: str = "MALTOPIC_API_KEY", timeout: float = 120.0, batch_size: int = 256,
                 client=None):
        import httpx

        key = os.environ.get(api_key_env, "").strip()
        if not key and client is None:
            raise ConfigError(f"environment variable {api_key_env} is not set")
        self.model = model
        self.url = base_url.rstrip("/") + "/embeddings"
        self.batch_size = batch_size
        self.client = client or httpx.Client(timeout=timeout)
        self.headers = {"Authorization": f"Bearer {key}"} if key else {}

    def embed(self, texts):
        from .errors import ProviderError

        rows = []
        for start in range(0, len(texts), self.batch_size):
            chunk = list(texts[start:start + self.batch_size])
            # the endpoint rejects empty strings
            resp = self.client.post(self.url, headers=self.headers,
                                    json={"model": self.model, "input": [t or " " for t in chunk]})
            if resp.status_code >= 400:
                raise ProviderError(resp.status_code, resp.text)
            data = sorted(resp.json()["data"], key=lambda d: d["index"])
            rows.extend(d["embedding"] for d in data)
        return np.asarray(rows, dtype=float).reshape(len(texts), -1)


def _embed(embedder: Embedder, texts: Sequence[str]) -> np.ndarray:
    matrix = np.asarray(embedder.embed(list(texts)), dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != len(texts):
        raise MetricError(f"embedder returned shape {matrix.shape} for {len(texts)} texts")
    if not np.all(np.isfinite(matrix)):
        raise MetricError("embedder returned non-finite values")
    return matrix


def avg_topic_similarity(topics: Sequence[Topic], embedder: Embedder) -> float:
    """Mean cosine over all ordered pairs of distinct topics."""
    n = len(topics)
    if n < 2:
        raise TooFewTopicsError(f"need at least 2 topics, got {n}")
    vectors = _embed(embedder, [t.canonical_text for t in topics])
    total = math.fsum(cosine(vectors[i], vectors[j]) for i in range(n) for j in range(n) if i != j)
    return total / (n * (n - 1))


@dataclass(frozen=True)
class CoverageResult:
    fraction: float
    covered_ids: tuple[str, ...]
    best_similarity: dict[str, float | None] = field(default_factory=dict)


def coverage(docs: TokenizedCorpus, topics: Sequence[Topic], embedder: Embedder,
             config: CoverageConfig = CoverageConfig()) -> CoverageResult:
    """Share of documents whose best topic cosine reaches ``theta``.

    A document that embeds to the zero vector has no defined similarity and
    counts as uncovered.
    """
    if not docs.documents:
        raise EmptyCorpusError("coverage needs at least one document")
    if not topics:
        raise EmptyTopicsError("coverage needs at least one topic")
    topic_vecs = _embed(embedder, [t.canonical_text for t in topics])
    doc_vecs = _embed(embedder, [d.normalized_text for d in docs.documents])
    if topic_vecs.shape[1] != doc_vecs.shape[1]:
        raise DimensionMismatchError("topic and document embeddings differ in dimension")
    usable = [v for v in topic_vecs if np.linalg.norm(v) > 0]
    if not usable:
        raise ZeroVectorError("every topic embedded to the zero vector")

    covered, best = [], {}
    for doc, vec in zip(docs.documents, doc_vecs):
        if np.linalg.norm(vec) == 0:
            best[doc.doc_id] = None
            continue
        s = max(cosine(vec, t) for t in usable)
        best[doc.doc_id] = s
        if s >= config.theta:
            covered.append(doc.doc_id)
    return CoverageResult(len(covered) / len(docs.documents), tuple(covered), best)


@dataclass(frozen=True)
class MetricsReport:
    coherence: float
    diversity: float
    avg_similarity: float | None
    coverage: float
    per_topic_coherence: dict[str, float]
    covered_doc_ids: tuple[str, ...]
    n_topics: int
    n_documents: int
    flags: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "coherence": self.coherence,
            "diversity": self.diversity,
            "avg_similarity": self.avg_similarity,
            "coverage": self.coverage,
            "per_topic_coherence": dict(self.per_topic_coherence),
            "covered_doc_ids": list(self.covered_doc_ids),
            "n_topics": self.n_topics,
            "n_documents": self.n_documents,
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "MetricsReport":
        return cls(
            coherence=data["coherence"],
            diversity=data["diversity"],
            avg_similarity=data["avg_similarity"],
            coverage=data["coverage"],
            per_topic_coherence=dict(data["per_topic_coherence"]),
            covered_doc_ids=tuple(data["covered_doc_ids"]),
            n_topics=data["n_topics"],
            n_documents=data["n_documents"],
            flags=tuple(data.get("flags", ())),
        )


def evaluate(
    topics: Sequence[Topic],
    corpus: TokenizedCorpus,
    embedder: Embedder,
    coherence_config: CoherenceConfig = CoherenceConfig(),
    coverage_config: CoverageConfig = CoverageConfig(),
) -> MetricsReport:
    if not topics:
        raise EmptyTopicsError("cannot evaluate an empty topic list")
    coh = coherence(topics, corpus, coherence_config)
    flags = [f"low-word-count:{name}" for name in coh.flagged]
    try:
        sim = avg_topic_similarity(topics, embedder)
    except TooFewTopicsError:
        sim = None
        flags.append("too-few-topics")
    cov = coverage(corpus, topics, embedder, coverage_config)
    return MetricsReport(
        coherence=coh.overall,
        diversity=diversity(topics),
        avg_similarity=sim,
        coverage=cov.fraction,
        per_topic_coherence=coh.per_topic,
        covered_doc_ids=cov.covered_ids,
        n_topics=len(topics),
        n_documents=len(corpus.documents),
        flags=tuple(flags),
    )
