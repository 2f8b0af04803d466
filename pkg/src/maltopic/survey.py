"""Loading and validating survey exports that mix structured and free-text answers."""

from __future__ import annotations

import csv
import logging
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping

from .errors import (
    DatasetIOError,
    DuplicateIdError,
    MalformedRowError,
    MissingColumnError,
    SchemaError,
)

logger = logging.getLogger(__name__)

ID_COLUMN = "id"


class FieldKind(str, Enum):
    FREE_TEXT = "free_text"
    STRUCTURED = "structured"


@dataclass(frozen=True)
class FieldSchema:
    name: str
    kind: FieldKind
    description: str | None = None

    def __post_init__(self):
        if not self.name or not self.name.strip():
            raise SchemaError("field name must be non-empty")
        object.__setattr__(self, "kind", FieldKind(self.kind))

    def to_dict(self) -> dict:
        out = {"name": self.name, "kind": self.kind.value}
        if self.description is not None:
            out["description"] = self.description
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "FieldSchema":
        try:
            return cls(data["name"], FieldKind(data["kind"]), data.get("description"))
        except (KeyError, ValueError) as exc:
            raise SchemaError(f"bad field schema {dict(data)!r}: {exc}") from exc


@dataclass(frozen=True)
class SurveyRecord:
    record_id: str
    values: Mapping[str, str]

    def get(self, name: str, default: str = "") -> str:
        return self.values.get(name, default)


@dataclass(frozen=True)
class SurveyDataset:
    schema: tuple[FieldSchema, ...]
    records: tuple[SurveyRecord, ...] = ()

    def __len__(self) -> int:
        return len(self.records)

    def field(self, name: str) -> FieldSchema | None:
        for f in self.schema:
            if f.name == name:
                return f
        return None

    @property
    def field_names(self) -> list[str]:
        return [f.name for f in self.schema]


@dataclass(frozen=True)
class ValidationIssue:
    kind: str
    message: str
    record_id: str | None = None
    field: str | None = None


def check_schema(schema: Iterable[FieldSchema]) -> list[FieldSchema]:
    schema = list(schema)
    dupes = [n for n, c in Counter(f.name for f in schema).items() if c > 1]
    if dupes:
        raise SchemaError(f"duplicate field names in schema: {sorted(dupes)}")
    return schema


def load_dataset(
    path: str | Path,
    schema: Iterable[FieldSchema],
    delimiter: str = ",",
) -> SurveyDataset:
    """Read a delimited UTF-8 file with a header row into a SurveyDataset.

    Columns are matched to schema names exactly; extra columns are ignored.
    The record id comes from an ``id`` column when present, otherwise it is the
    0-based data row index.
    """
    schema = check_schema(schema)
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh, delimiter=delimiter))
    except (OSError, UnicodeDecodeError, csv.Error) as exc:
        raise DatasetIOError(f"cannot read {path}: {exc}") from exc

    if not rows:
        raise DatasetIOError(f"{path} has no header row")
    header = rows[0]
    missing = [f.name for f in schema if f.name not in header]
    if missing:
        raise MissingColumnError(f"{path}: columns missing from header: {missing}")
    positions = {f.name: header.index(f.name) for f in schema}
    id_pos = header.index(ID_COLUMN) if ID_COLUMN in header else None

    records = []
    seen: set[str] = set()
    row_index = 0
    for line_no, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise MalformedRowError(
                f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}"
            )
        record_id = row[id_pos] if id_pos is not None else str(row_index)
        if record_id in seen:
            raise DuplicateIdError(f"{path}:{line_no}: duplicate record id {record_id!r}")
        seen.add(record_id)
        values = {name: row[pos] for name, pos in positions.items()}
        records.append(SurveyRecord(record_id, values))
        row_index += 1

    logger.debug("loaded %d records from %s", len(records), path)
    return SurveyDataset(tuple(schema), tuple(records))


def write_dataset(dataset: SurveyDataset, path: str | Path, delimiter: str = ",") -> None:
    """Serialize a dataset in the format load_dataset reads (id column first)."""
    names = dataset.field_names
    header = names if ID_COLUMN in names else [ID_COLUMN, *names]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter=delimiter)
        writer.writerow(header)
        for rec in dataset.records:
            writer.writerow(
                [rec.record_id if col == ID_COLUMN and col not in names else rec.values.get(col, "")
                 for col in header]
            )


def validate_dataset(dataset: SurveyDataset) -> list[ValidationIssue]:
    issues: list[ValidationIssue] = []
    names = [f.name for f in dataset.schema]
    for name, count in Counter(names).items():
        if count > 1:
            issues.append(ValidationIssue("duplicate-field", f"field {name!r} declared {count} times", field=name))
    for f in dataset.schema:
        if not f.name.strip():
            issues.append(ValidationIssue("empty-field-name", "schema field with empty name"))

    declared = set(names)
    seen: set[str] = set()
    for rec in dataset.records:
        if rec.record_id in seen:
            issues.append(ValidationIssue("duplicate-id", f"record id {rec.record_id!r} repeated",
                                          record_id=rec.record_id))
        seen.add(rec.record_id)
        for name in names:
            if name not in rec.values:
                issues.append(ValidationIssue("missing-field", f"field {name!r} absent",
                                              record_id=rec.record_id, field=name))
        for name in rec.values:
            if name not in declared:
                issues.append(ValidationIssue("unexpected-field", f"field {name!r} not in schema",
                                              record_id=rec.record_id, field=name))
    return issues
