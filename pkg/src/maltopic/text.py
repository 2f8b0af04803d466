"""Text normalization shared by metrics, baseline preparation and the mock backend."""

from __future__ import annotations

import re
from functools import lru_cache
from typing import Iterable

_NON_WORD = re.compile(r"[^\w\s]|_")
_SPACES = re.compile(r"\s+")


def normalize_text(text: str) -> str:
    """Lowercase, turn punctuation into spaces and collapse whitespace."""
    text = _NON_WORD.sub(" ", text.lower())
    return _SPACES.sub(" ", text).strip()


def tokenize(text: str, stopwords: Iterable[str] = ()) -> list[str]:
    stop = stopwords if isinstance(stopwords, (set, frozenset)) else set(stopwords)
    return [tok for tok in normalize_text(text).split() if tok not in stop]


@lru_cache(maxsize=1)
def english_stopwords() -> frozenset[str]:
    from sklearn.feature_extraction.text import ENGLISH_STOP_WORDS

    return frozenset(ENGLISH_STOP_WORDS)


def resolve_stopwords(spec: str | Iterable[str] | None) -> frozenset[str]:
    """``"english"`` selects the bundled English list; ``None``/``"none"`` is empty."""
    if spec is None or spec == "none":
        return frozenset()
    if spec == "english":
        return english_stopwords()
    if isinstance(spec, str):
        raise ValueError(f"unknown stopword list {spec!r}")
    return frozenset(normalize_text(w) for w in spec if normalize_text(w))
