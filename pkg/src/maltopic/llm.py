"""Chat-completion access: parameters, budgets, cost accounting, caching and backends."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import tempfile
import threading
import time
from collections import Counter
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

from . import prompts
from .errors import ConfigError, GatewayError, OverBudgetError, ProviderError, TransportError
from .text import english_stopwords, normalize_text

logger = logging.getLogger(__name__)

DEFAULT_MODEL = "gpt-4o-mini-2024-07-18"
DEFAULT_BASE_URL = "https://api.openai.com/v1"
API_KEY_ENV = "MALTOPIC_API_KEY"


@dataclass(frozen=True)
class GenerationParams:
    model_id: str = DEFAULT_MODEL
    seed: int = 1234
    temperature: float = 0.2
    top_p: float = 0.9
    max_output_tokens: int = 16000

    def __post_init__(self):
        if not 0 <= self.temperature <= 2:
            raise ValueError(f"temperature must be in [0, 2], got {self.temperature}")
        if not 0 < self.top_p <= 1:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")


@dataclass(frozen=True)
class TokenBudget:
    max_input_tokens: int = 128_000
    max_output_tokens: int = 16_000
    safety_margin: float = 0.1

    def __post_init__(self):
        if self.max_input_tokens <= 0 or self.max_output_tokens <= 0:
            raise ValueError("token limits must be positive")
        if not 0 <= self.safety_margin < 1:
            raise ValueError("safety_margin must be in [0, 1)")

    @property
    def effective_input_tokens(self) -> int:
        """Input tokens usable for packing once the safety headroom is taken off."""
        return math.floor(self.max_input_tokens * (1 - self.safety_margin))


@dataclass(frozen=True)
class CostModel:
    input_usd_per_million_tokens: float = 0.15
    output_usd_per_million_tokens: float = 0.075

    def __post_init__(self):
        if self.input_usd_per_million_tokens < 0 or self.output_usd_per_million_tokens < 0:
            raise ValueError("token prices must be nonnegative")

    def cost(self, input_tokens: int, output_tokens: int) -> float:
        return (input_tokens * self.input_usd_per_million_tokens / 1e6
                + output_tokens * self.output_usd_per_million_tokens / 1e6)


@dataclass(frozen=True)
class ChatExchange:
    prompt_text: str
    response_text: str
    input_tokens: int
    output_tokens: int
    cost_usd: float
    cached: bool = False
    warnings: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        out = asdict(self)
        out["warnings"] = list(self.warnings)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ChatExchange":
        data = dict(data)
        data["warnings"] = tuple(data.get("warnings", ()))
        return cls(**data)


def estimate_tokens(text: str) -> int:
    """Rough token count: one token per four characters, rounded up."""
    return -(-len(text) // 4)


def total_cost(exchanges: Iterable[ChatExchange]) -> float:
    return math.fsum(x.cost_usd for x in exchanges)


class Backend(Protocol):
    def generate(self, prompt: str, params: GenerationParams) -> tuple[str, tuple[int, int] | None]:
        """Return the response text and (input, output) token usage if the provider reports it."""


class Gateway:
    """Entry point the agents use to talk to a model.

    Enforces the input budget before any call, retries transport failures
    with exponential backoff, prices every exchange and optionally caches
    responses on disk (one JSON file per request digest).
    """

    def __init__(
        self,
        backend: Backend,
        budget: TokenBudget | None = None,
        cost_model: CostModel | None = None,
        cache_dir: str | Path | None = None,
        max_attempts: int = 3,
        backoff_seconds: float = 0.5,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.backend = backend
        self.budget = budget or TokenBudget()
        self.cost_model = cost_model or CostModel()
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self.max_attempts = max_attempts
        self.backoff_seconds = backoff_seconds
        self._sleep = sleep
        self._lock = threading.Lock()
        self.live_calls = 0

    def generate(self, prompt: str, params: GenerationParams) -> ChatExchange:
        """Cached when the gateway has a cache directory, live otherwise."""
        if self.cache_dir is None:
            return self.complete(prompt, params)
        return self.cached_complete(prompt, params, self.cache_dir)

    def complete(self, prompt: str, params: GenerationParams) -> ChatExchange:
        estimated = estimate_tokens(prompt)
        if estimated > self.budget.max_input_tokens:
            raise OverBudgetError(estimated, self.budget.max_input_tokens)

        attempt = 0
        while True:
            attempt += 1
            with self._lock:
                self.live_calls += 1
            try:
                text, usage = self.backend.generate(prompt, params)
                break
            except (TransportError, ProviderError) as exc:
                retriable = isinstance(exc, TransportError) or exc.retriable
                if not retriable or attempt >= self.max_attempts:
                    raise
                delay = self.backoff_seconds * 2 ** (attempt - 1)
                logger.warning("attempt %d/%d failed (%s); retrying in %.2fs",
                               attempt, self.max_attempts, exc, delay)
                self._sleep(delay)

        if usage is None:
            usage = (estimated, estimate_tokens(text))
        n_in, n_out = usage
        return ChatExchange(prompt, text, n_in, n_out, self.cost_model.cost(n_in, n_out))

    def cached_complete(self, prompt: str, params: GenerationParams, cache_dir: str | Path) -> ChatExchange:
        cache_dir = Path(cache_dir)
        key = cache_key(prompt, params)
        entry = cache_dir / f"{key}.json"
        warnings = []
        try:
            if entry.exists():
                stored = json.loads(entry.read_text(encoding="utf-8"))
                return replace(ChatExchange.from_dict(stored["exchange"]), cached=True)
        except (OSError, ValueError, KeyError, TypeError) as exc:
            warnings.append(f"cache read failed for {key}: {exc}")
            logger.warning(warnings[-1])

        exchange = self.complete(prompt, params)
        try:
            cache_dir.mkdir(parents=True, exist_ok=True)
            payload = {"key": key, "params": asdict(params), "exchange": exchange.to_dict()}
            _atomic_write(entry, json.dumps(payload, ensure_ascii=False, indent=1))
        except OSError as exc:
            warnings.append(f"cache write failed for {key}: {exc}")
            logger.warning(warnings[-1])
        if warnings:
            exchange = replace(exchange, warnings=tuple(warnings))
        return exchange


def cache_key(prompt: str, params: GenerationParams) -> str:
    material = json.dumps({"params": asdict(params), "prompt": prompt}, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(material.encode("utf-8")).hexdigest()


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class OpenAIChatBackend:
    """Talks to any OpenAI-compatible ``/chat/completions`` endpoint."""

    def __init__(
        self,
        base_url: str = DEFAULT_BASE_URL,
        api_key_env: str = API_KEY_ENV,
        timeout: float = 120.0,
        client=None,
    ):
        import httpx

        api_key = os.environ.get(api_key_env, "").strip()
        if not api_key and client is None:
            raise ConfigError(f"environment variable {api_key_env} is not set")
        self.url = base_url.rstrip("/") + "/chat/completions"
        self._httpx = httpx
        self.client = client or httpx.Client(timeout=timeout)
        self.headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}

    def generate(self, prompt, params):
        body = {
            "model": params.model_id,
            "messages": [{"role": "user", "content": prompt}],
            "seed": params.seed,
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_output_tokens,
        }
        try:
            resp = self.client.post(self.url, json=body, headers=self.headers)
        except self._httpx.HTTPError as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code >= 400:
            retriable = resp.status_code == 429 or resp.status_code >= 500
            raise ProviderError(resp.status_code, resp.text, retriable=retriable)
        try:
            data = resp.json()
            text = data["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProviderError(resp.status_code, f"unexpected response body: {resp.text}") from exc
        usage = data.get("usage") or {}
        if "prompt_tokens" in usage and "completion_tokens" in usage:
            return text, (int(usage["prompt_tokens"]), int(usage["completion_tokens"]))
        return text, None


class ScriptedBackend:
    """Returns canned responses in order; handy for exercising retry paths."""

    def __init__(self, responses: Sequence[str | Exception]):
        self._responses = list(responses)
        self.prompts: list[str] = []
        self._lock = threading.Lock()

    def generate(self, prompt, params):
        with self._lock:
            self.prompts.append(prompt)
            if not self._responses:
                raise GatewayError("scripted backend ran out of responses")
            item = self._responses.pop(0)
        if isinstance(item, Exception):
            raise item
        return item, None


_MOCK_IGNORED = {"years", "year", "experience", "respondent", "role"}


class MockBackend:
    """Offline, rule-driven stand-in for a chat model.

    The response is a pure function of the prompt:

    * enrichment prompts echo the free-text answer behind a context prefix,
      e.g. ``As a Data Scientist with 5 years of experience: <answer>``;
    * topic prompts yield up to three topics built from the most frequent
      content words of the batch;
    * dedup prompts merge topics whose names match case-insensitively.

    ``topic_response`` / ``dedup_response`` replace the generated output for
    those prompt shapes when set.
    """

    def __init__(self, topic_response: str | None = None, dedup_response: str | None = None,
                 topics_per_batch: int = 3, words_per_topic: int = 4):
        self.topic_response = topic_response
        self.dedup_response = dedup_response
        self.topics_per_batch = topics_per_batch
        self.words_per_topic = words_per_topic

    def generate(self, prompt, params):
        if prompts.ENRICH_MARKER in prompt and prompts.ENRICH_FOOTER in prompt:
            return self._enrich(prompt), None
        if prompts.DEDUP_HEADER in prompt and prompts.DEDUP_FOOTER in prompt:
            if self.dedup_response is not None:
                return self.dedup_response, None
            return self._dedup(prompt), None
        if prompts.TOPIC_HEADER in prompt and prompts.TOPIC_FOOTER in prompt:
            if self.topic_response is not None:
                return self.topic_response, None
            return self._topics(prompt), None
        return "", None

    @staticmethod
    def _enrich(prompt: str) -> str:
        match = re.search(re.escape(prompts.ENRICH_MARKER) + r" (\S+) ", prompt)
        column = match.group(1) if match else ""
        block = prompt.split(f"\n{prompts.ENRICH_HEADER}\n", 1)[-1]
        block = block.rsplit("\n\n" + prompts.ENRICH_FOOTER, 1)[0]
        lines = block.split("\n")
        context, response = [], ""
        for i, line in enumerate(lines):
            if line == f"{column}:" or line.startswith(f"{column}: "):
                response = "\n".join([line[len(column) + 1:].lstrip(" "), *lines[i + 1:]])
                break
            name, _, value = line.partition(": ")
            context.append((name, value.strip()))
        return _mock_enrichment(context, response)

    def _topics(self, prompt: str) -> str:
        body = prompt.split(prompts.TOPIC_HEADER + "\n", 1)[1]
        body = body.split("\n\n" + prompts.TOPIC_FOOTER, 1)[0]
        stop = english_stopwords() | _MOCK_IGNORED
        counts: Counter[str] = Counter()
        first_seen: dict[str, int] = {}
        for line in body.split("\n"):
            text = re.sub(r"^\[\d+\] ", "", line)
            if text.startswith("As a ") and ": " in text:
                text = text.split(": ", 1)[1]
            for tok in dict.fromkeys(normalize_text(text).split()):
                if len(tok) < 3 or tok.isdigit() or tok in stop:
                    continue
                counts[tok] += 1
                first_seen.setdefault(tok, len(first_seen))
        ranked = sorted(counts, key=lambda w: (-counts[w], first_seen[w]))
        ranked = ranked[: self.topics_per_batch * self.words_per_topic]
        groups = [ranked[i:i + self.words_per_topic] for i in range(0, len(ranked), self.words_per_topic)]
        if len(groups) > 1 and len(groups[-1]) < 2:
            groups[-2].extend(groups.pop())
        if not groups:
            groups = [["general", "feedback"]]
        topics = []
        for words in groups:
            name = " and ".join(w.title() for w in words[:2])
            topics.append({
                "name": name,
                "description": "Responses that mention " + ", ".join(words) + ".",
                "respondent_profile": f"Respondents who bring up {words[0]}.",
                "representative_words": words,
            })
        return json.dumps(topics, ensure_ascii=False)

    @staticmethod
    def _dedup(prompt: str) -> str:
        body = prompt.split(prompts.DEDUP_HEADER + "\n", 1)[1]
        body = body.split("\n\n" + prompts.DEDUP_FOOTER, 1)[0]
        merged: dict[str, dict] = {}
        for line in body.split("\n"):
            for topic in json.loads(line)["topics"]:
                key = " ".join(topic["name"].lower().split())
                if key not in merged:
                    merged[key] = {**topic, "representative_words": list(topic["representative_words"]),
                                   "source_topics": [topic["name"]]}
                    continue
                out = merged[key]
                seen = {w.lower() for w in out["representative_words"]}
                out["representative_words"] += [w for w in topic["representative_words"]
                                                 if w.lower() not in seen]
                if topic["name"] not in out["source_topics"]:
                    out["source_topics"].append(topic["name"])
        return json.dumps(list(merged.values()), ensure_ascii=False)


def _mock_enrichment(context: list[tuple[str, str]], response: str) -> str:
    context = [(name, value) for name, value in context if value]
    if not context:
        return f"As a respondent: {response}"
    head = f"As a {context[0][1]}"
    rest = [f"{value} {prompts.humanize(name)}" for name, value in context[1:]]
    if rest:
        head += " with " + " and ".join(rest)
    return f"{head}: {response}"
