import json
import math
import time

import pytest

from conftest import base_config, write_survey
from maltopic.errors import ConfigError, RunLockedError, TopicsFileError
from maltopic.llm import Gateway, MockBackend
from maltopic.metrics import HashingEmbedder
from maltopic.pipeline import (
    LOCK_FILE,
    PipelineConfig,
    load_corpus_file,
    load_run,
    load_topics_file,
    render_report,
    run_eval_only,
    run_pipeline,
)

ARTIFACTS = ["enriched.json", "batches.json", "dedup.json", "metrics.json", "cost.json", "report.md",
             "exchanges/enrich.json", "exchanges/topics.json", "exchanges/dedup.json"]


def config_for(path, **overrides):
    return PipelineConfig.from_dict(base_config(path, **overrides))


def test_full_run(survey_file, tmp_path):
    start = time.perf_counter()
    art = run_pipeline(config_for(survey_file), tmp_path / "out")
    assert time.perf_counter() - start < 30
    assert len(art.enriched) == 202
    assert sum(r.excluded for r in art.enriched) == 202 // 17
    assert len(art.batch_results) >= 2
    assert 1 <= len(art.topics) <= 20
    assert art.metrics is not None and 0 <= art.metrics.coverage <= 1
    for name in ARTIFACTS:
        assert (tmp_path / "out" / name).exists(), name
    assert not (tmp_path / "out" / LOCK_FILE).exists()
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["stages_completed"] == ["enrich", "topics", "dedup", "metrics"]


def test_empty_dataset(tmp_path):
    path = write_survey(tmp_path / "e.csv", [])
    art = run_pipeline(config_for(path), tmp_path / "out")
    assert art.enriched == [] and art.topics == () and art.metrics is None
    assert "dataset has no records" in art.warnings
    assert "No topics were produced" in (tmp_path / "out" / "report.md").read_text()


def test_cold_runs_byte_identical_and_warm_cache(survey_file, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run_pipeline(config_for(survey_file), a)
    run_pipeline(config_for(survey_file), b)
    for name in ARTIFACTS:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    warm = run_pipeline(config_for(survey_file), a, fresh=True)
    assert warm.manifest["run"]["live_calls"] == 0
    assert warm.manifest["run"]["cache_hits"] > 0
    for name in ARTIFACTS:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_resume_skips_finished_stages(survey_file, tmp_path):
    out = tmp_path / "out"
    run_pipeline(config_for(survey_file), out)
    (out / "metrics.json").unlink()
    backend = MockBackend()
    gw = Gateway(backend)  # no cache: any call would be a live one
    art = run_pipeline(config_for(survey_file), out, gateway=gw)
    assert gw.live_calls == 0
    assert art.manifest["stages_resumed"] == ["enrich", "topics", "dedup"]


def test_config_change_invalidates_resume(survey_file, tmp_path):
    out = tmp_path / "out"
    run_pipeline(config_for(survey_file), out)
    art = run_pipeline(config_for(survey_file, corpus="original"), out)
    assert art.manifest["stages_resumed"] == []


def test_parallelism_does_not_invalidate(survey_file):
    assert config_for(survey_file).fingerprint() == config_for(survey_file, parallelism=1).fingerprint()


def test_lock(survey_file, tmp_path):
    out = tmp_path / "out"
    out.mkdir()
    (out / LOCK_FILE).write_text("123")
    with pytest.raises(RunLockedError):
        run_pipeline(config_for(survey_file), out)


def test_cost_ledger_matches_exchanges(survey_file, tmp_path):
    out = tmp_path / "out"
    art = run_pipeline(config_for(survey_file), out)
    xs = [x for s in ("enrich", "topics", "dedup")
          for x in json.loads((out / "exchanges" / f"{s}.json").read_text())]
    assert art.cost["exchanges"] == len(xs)
    assert art.cost["total_usd"] == math.fsum(x["cost_usd"] for x in xs)
    assert art.cost["input_tokens"] == sum(x["input_tokens"] for x in xs)


@pytest.mark.parametrize("overrides", [
    {"target_field": "job_title"},
    {"context_fields": ["concerns"]},
    {"corpus": "neither"},
    {"parallelism": 0},
    {"budget": {"max_input_tokens": -1}},
])
def test_invalid_configs(survey_file, overrides):
    with pytest.raises(ConfigError):
        config_for(survey_file, **overrides)


def test_report_from_loaded_run(survey_file, tmp_path, reference_topics):
    out = tmp_path / "out"
    run_pipeline(config_for(survey_file), out)
    art = load_run(out)
    text = render_report(art)
    assert text == render_report(load_run(out))
    assert text == (out / "report.md").read_text()
    assert all(t.name in text for t in art.topics)


def test_eval_only_reference_topics(tmp_path, reference_dicts):
    topics = tmp_path / "t.json"
    topics.write_text(json.dumps(reference_dicts))
    corpus = tmp_path / "c.txt"
    corpus.write_text("job loss fears\nprivacy and security of data\nnothing relevant here\n")
    report = run_eval_only(topics, corpus, HashingEmbedder())
    assert report.n_topics == 10 and report.n_documents == 3
    assert report.avg_similarity is not None


def test_eval_only_single_topic(tmp_path, reference_dicts):
    topics = tmp_path / "t.json"
    topics.write_text(json.dumps({"topics": reference_dicts[:1]}))
    corpus = tmp_path / "c.json"
    corpus.write_text(json.dumps(["job loss", {"id": "x", "text": "layoffs"}, {"text": "y", "excluded": True}]))
    assert load_corpus_file(corpus) == [("0", "job loss"), ("x", "layoffs")]
    report = run_eval_only(topics, corpus, HashingEmbedder())
    assert report.avg_similarity is None and "too-few-topics" in report.flags


@pytest.mark.parametrize("payload", ["not json", "{}", "[]", '[{"name": "x"}]'])
def test_malformed_topics_file(tmp_path, payload):
    path = tmp_path / "t.json"
    path.write_text(payload)
    with pytest.raises(TopicsFileError):
        load_topics_file(path)
