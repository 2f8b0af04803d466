"""Prepare concatenated, cleaned survey text for external LDA/BERTopic runs."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .survey import FieldSchema, SurveyDataset, SurveyRecord
from .text import normalize_text


@dataclass(frozen=True)
class ConcatenatedDocument:
    record_id: str
    text: str


def concatenate_record(record: SurveyRecord, schema: Sequence[FieldSchema]) -> ConcatenatedDocument:
    parts = [record.values.get(f.name, "").strip() for f in schema]
    return ConcatenatedDocument(record.record_id, " ".join(p for p in parts if p))


def clean_text(text: str, stopwords: Iterable[str] = ()) -> str:
    stop = set(stopwords)
    return " ".join(tok for tok in normalize_text(text).split() if tok not in stop)


def preprocess_for_baseline(docs: Sequence[ConcatenatedDocument], stopwords: Iterable[str] = ()) -> list[ConcatenatedDocument]:
    """Lowercase, strip punctuation and extra whitespace, drop stopwords.

    No lemmatization is applied; write_baseline_corpus records that in its
    metadata so comparisons against lemmatized baselines stay honest.
    """
    stop = frozenset(stopwords)
    return [ConcatenatedDocument(d.record_id, clean_text(d.text, stop)) for d in docs]


def write_baseline_corpus(
    dataset: SurveyDataset,
    out_dir: str | Path,
    stopwords: Iterable[str] = (),
    name: str = "corpus",
) -> tuple[Path, Path]:
    """Write ``<name>.txt`` (one document per line) and ``<name>.json`` (line -> record id)."""
    stop = frozenset(stopwords)
    docs = [concatenate_record(r, dataset.schema) for r in dataset.records]
    cleaned = preprocess_for_baseline(docs, stop)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    text_path = out_dir / f"{name}.txt"
    meta_path = out_dir / f"{name}.json"
    text_path.write_text("".join(d.text + "\n" for d in cleaned), encoding="utf-8")
    meta = {
        "documents": len(cleaned),
        "line_to_record_id": {str(i): d.record_id for i, d in enumerate(cleaned, start=1)},
        "field_order": [f.name for f in dataset.schema],
        "steps": ["concatenate", "lowercase", "strip_punctuation", "collapse_whitespace",
                  "remove_stopwords"],
        "stopword_count": len(stop),
        "lemmatized": False,
    }
    meta_path.write_text(json.dumps(meta, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return text_path, meta_path
