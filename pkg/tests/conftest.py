import csv
import json
from pathlib import Path

import numpy as np
import pytest

from maltopic.llm import Gateway, MockBackend
from maltopic.survey import FieldKind, FieldSchema
from maltopic.text import normalize_text
from maltopic.topics import Topic

FIXTURES = Path(__file__).parent / "fixtures"

SCHEMA = [
    FieldSchema("job_title", FieldKind.STRUCTURED),
    FieldSchema("years_of_experience", FieldKind.STRUCTURED),
    FieldSchema("concerns", FieldKind.FREE_TEXT),
]

TITLES = ["Data Scientist", "Software Engineer", "Product Manager", "Student", "Engineering Leader"]
ANSWERS = [
    "worried about job loss and automation",
    "privacy of company data is a risk",
    "hallucinations make outputs unreliable, so trust is low",
    "cost of tools and budget pressure",
    "skills gap, we need training to upskill",
    "hiring is slower and the job market is competitive",
]


class VocabEmbedder:
    """Exact bag-of-words embedder over a growing vocabulary (no hashing)."""

    def __init__(self, dimension=512):
        self.dimension = dimension
        self.index = {}

    def embed(self, texts):
        out = np.zeros((len(texts), self.dimension))
        for row, text in enumerate(texts):
            for tok in normalize_text(text).split():
                col = self.index.setdefault(tok, len(self.index))
                out[row, col] += 1
        return out


def write_survey(path, rows, header=("job_title", "years_of_experience", "concerns")):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def synthetic_rows(n, blank_every=0):
    rows = []
    for i in range(n):
        answer = "" if blank_every and i % blank_every == blank_every - 1 else ANSWERS[i % len(ANSWERS)]
        rows.append([TITLES[i % len(TITLES)], str(i % 21), answer])
    return rows


@pytest.fixture
def schema():
    return list(SCHEMA)


@pytest.fixture
def reference_dicts():
    return json.loads((FIXTURES / "reference_topics.json").read_text())


@pytest.fixture
def reference_topics(reference_dicts):
    return [Topic.from_dict(d) for d in reference_dicts]


@pytest.fixture
def mock_gateway():
    return Gateway(MockBackend(), sleep=lambda s: None)


@pytest.fixture
def survey_file(tmp_path):
    return write_survey(tmp_path / "survey.csv", synthetic_rows(202, blank_every=17))


def base_config(input_path, **overrides):
    data = {
        "input": str(input_path),
        "schema": [f.to_dict() for f in SCHEMA],
        "target_field": "concerns",
        "context_fields": ["job_title", "years_of_experience"],
        "budget": {"max_input_tokens": 3000},
    }
    data.update(overrides)
    return data



# ---- acceptance summary -------------------------------------------------------------------

_criteria: dict[int, str] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = marker.args[0]


def pytest_runtest_logreport(report):
    number = getattr(report, "criterion", None)
    if number is None:
        return
    if report.failed:
        _criteria[number] = "FAIL"
    elif report.skipped:
        _criteria.setdefault(number, "SKIP")
    elif report.when == "call":
        _criteria.setdefault(number, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        terminalreporter.write_line(f"criterion {number:2d}: {_criteria[number]}")
