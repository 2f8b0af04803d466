import json
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maltopic.enrichment import EnrichedResponse
from maltopic.errors import (
    InvalidTopicError,
    TopicExtractionError,
    TopicParseError,
    UnparseableAfterRetryError,
    UnsplittableResponseError,
)
from maltopic.llm import Gateway, GenerationParams, MockBackend, ScriptedBackend, TokenBudget, estimate_tokens
from maltopic.topics import (
    Topic,
    TopicBatchResult,
    build_topic_prompt,
    extract_topics,
    model_topics,
    parse_topics,
    partition_into_batches,
)

PARAMS = GenerationParams()
ONE_TOPIC = {"name": "Cost", "description": "Money.", "respondent_profile": "Leads.",
             "representative_words": ["cost", "budget"]}


def resp(i, text, excluded=False):
    return EnrichedResponse(str(i), text, "" if excluded else text, {}, excluded=excluded)


def test_packing_2_2_1():
    responses = [resp(i, "x" * 4000) for i in range(5)]
    assert all(estimate_tokens(r.enriched_text) == 1000 for r in responses)
    batches = partition_into_batches(responses, TokenBudget(2500, safety_margin=0.0), 0)
    assert [len(b) for b in batches] == [2, 2, 1]
    assert [r.record_id for b in batches for r in b] == ["0", "1", "2", "3", "4"]


def test_safety_margin_applies():
    responses = [resp(i, "x" * 4000) for i in range(4)]
    # 2222 * 0.9 = 1999.8 -> 1999 usable tokens, so each batch holds one response
    assert [len(b) for b in partition_into_batches(responses, TokenBudget(2222), 0)] == [1, 1, 1, 1]
    assert [len(b) for b in partition_into_batches(responses, TokenBudget(2223), 0)] == [2, 2]


def test_single_batch_and_empty():
    responses = [resp(i, "short") for i in range(4)]
    assert partition_into_batches(responses, TokenBudget(), 100) == [responses]
    assert partition_into_batches([], TokenBudget(), 100) == []


def test_excluded_dropped():
    responses = [resp(0, "a"), resp(1, "", excluded=True), resp(2, "b")]
    assert [[r.record_id for r in b] for b in partition_into_batches(responses, TokenBudget(), 0)] == [["0", "2"]]


def test_unsplittable():
    with pytest.raises(UnsplittableResponseError) as info:
        partition_into_batches([resp(0, "x" * 400)], TokenBudget(100, safety_margin=0.0), 10)
    assert info.value.record_id == "0"


@settings(max_examples=80)
@given(st.lists(st.integers(1, 300), max_size=25), st.integers(300, 1200), st.integers(0, 100))
def test_partition_properties(lengths, limit, overhead):
    responses = [resp(i, "y" * n, excluded=(n % 7 == 0)) for i, n in enumerate(lengths)]
    budget = TokenBudget(limit, safety_margin=0.1)
    batches = partition_into_batches(responses, budget, overhead)
    flat = [r.record_id for b in batches for r in b]
    assert flat == [r.record_id for r in responses if not r.excluded]
    for b in batches:
        assert b
        assert overhead + sum(estimate_tokens(r.enriched_text) for r in b) <= budget.effective_input_tokens
    # greedy: the first member of each later batch would not have fit in the previous one
    for prev, nxt in zip(batches, batches[1:]):
        used = overhead + sum(estimate_tokens(r.enriched_text) for r in prev)
        assert used + estimate_tokens(nxt[0].enriched_text) > budget.effective_input_tokens


def test_topic_prompt():
    batch = [resp(0, "As a Student: privacy"), resp(1, "As a Lead: cost")]
    prompt = build_topic_prompt(batch)
    assert "[1] As a Student: privacy" in prompt and "[2] As a Lead: cost" in prompt
    for name in ("Topic Name", "Description", "Respondent Profile", "Representative words"):
        assert name in prompt
    for key in ("name", "description", "respondent_profile", "representative_words"):
        assert f'"{key}"' in prompt
    assert build_topic_prompt(batch) == prompt
    single = build_topic_prompt(batch[:1])
    assert "exhaustive" in single
    with pytest.raises(ValueError):
        build_topic_prompt([])


def test_parse_well_formed():
    topics = parse_topics(json.dumps([ONE_TOPIC]))
    assert topics == [Topic("Cost", "Money.", "Leads.", ("cost", "budget"))]


def test_parse_wrapped_in_prose():
    text = "Sure! Here are the topics:\n```json\n" + json.dumps([ONE_TOPIC]) + "\n```\nHope [this] helps."
    assert parse_topics(text) == parse_topics(json.dumps([ONE_TOPIC]))


def test_parse_skips_broken_bracket_before_array():
    text = "Note [see below\n" + json.dumps([ONE_TOPIC])
    assert len(parse_topics(text)) == 1


def test_parse_no_array():
    with pytest.raises(TopicParseError):
        parse_topics("I could not find topics.")
    with pytest.raises(TopicParseError):
        parse_topics("[]")
    with pytest.raises(TopicParseError):
        parse_topics('words: ["a", "b"]')


@pytest.mark.parametrize("patch", [
    {"name": ""},
    {"name": "   "},
    {"description": ""},
    {"respondent_profile": None},
    {"representative_words": []},
    {"representative_words": ["", "  "]},
    {"representative_words": [1, 2]},
])
def test_parse_invalid(patch):
    with pytest.raises(InvalidTopicError):
        parse_topics(json.dumps([{**ONE_TOPIC, **patch}]))


def test_parse_missing_field():
    entry = dict(ONE_TOPIC)
    del entry["respondent_profile"]
    with pytest.raises(InvalidTopicError, match="respondent_profile"):
        parse_topics(json.dumps([entry]))


def test_parse_duplicate_names_case_insensitive():
    with pytest.raises(InvalidTopicError, match="duplicate"):
        parse_topics(json.dumps([ONE_TOPIC, {**ONE_TOPIC, "name": " cost "}]))


def test_parse_cleans_words_and_accepts_aliases():
    entry = {"Topic Name": "Jobs", "Description": "d", "Respondent Profile": "p",
             "Representative words": "job loss, Job Loss, automation, "}
    [t] = parse_topics(json.dumps([entry]))
    assert t.representative_words == ("job loss", "automation")


def test_topic_invariants():
    with pytest.raises(InvalidTopicError):
        Topic("x", "d", "p", ("a", "A"))
    assert Topic("n", "d", "p", ["a", "b"]).canonical_text == "n d a b"


def test_extract_reference_topics(reference_dicts):
    g = Gateway(MockBackend(topic_response=json.dumps(reference_dicts)))
    result = extract_topics([resp(0, "anything"), resp(1, "else")], g, PARAMS)
    assert len(result.topics) == 10
    first = result.topics[0]
    assert first.name == "Job Displacement Concerns"
    assert first.representative_words == ("displacement", "automation", "job loss", "security", "anxiety")
    assert result.record_ids == ("0", "1") and result.attempts == 1


def test_repair_retry_succeeds():
    backend = ScriptedBackend(["no json here", json.dumps([ONE_TOPIC])])
    result = extract_topics([resp(0, "a")], Gateway(backend), PARAMS, batch_index=4)
    assert result.attempts == 2 and result.batch_index == 4
    assert len(result.exchanges) == 2
    assert "could not be parsed" in backend.prompts[1]
    assert backend.prompts[1].startswith(backend.prompts[0])


def test_repair_retry_exhausted():
    backend = ScriptedBackend(["nope", "still nope", "unused"])
    with pytest.raises(UnparseableAfterRetryError):
        extract_topics([resp(0, "a")], Gateway(backend), PARAMS)
    assert len(backend.prompts) == 2


def test_mock_topics_schema():
    batch = [resp(i, t) for i, t in enumerate([
        "As a Student with 2 years of experience: privacy of data worries me",
        "As a Lead with 9 years of experience: budget and cost pressure",
        "As a Engineer with 4 years of experience: data privacy and security",
    ])]
    result = extract_topics(batch, Gateway(MockBackend()), PARAMS)
    for t in result.topics:
        assert t.name and t.description and t.respondent_profile and t.representative_words


def test_model_topics_indices():
    responses = [resp(i, "privacy data " * 300) for i in range(5)]
    # per response: 900 text tokens + prefix; budget fits two per batch
    g = Gateway(MockBackend(), budget=TokenBudget(2500, safety_margin=0.0))
    results = model_topics(responses, g.budget, g, PARAMS)
    assert [r.batch_index for r in results] == [0, 1, 2]
    assert [len(r.record_ids) for r in results] == [2, 2, 1]


def test_model_topics_single_and_empty():
    g = Gateway(MockBackend())
    assert len(model_topics([resp(0, "a b c"), resp(1, "c d e")], g.budget, g, PARAMS)) == 1
    assert model_topics([resp(0, "", excluded=True)], g.budget, g, PARAMS) == []


def test_model_topics_aggregates_errors():
    responses = [resp(i, "z" * 4000) for i in range(3)]
    g = Gateway(ScriptedBackend(["bad"] * 6), budget=TokenBudget(2000, safety_margin=0.0))
    with pytest.raises(TopicExtractionError) as info:
        model_topics(responses, g.budget, g, PARAMS, parallelism=1)
    assert sorted(info.value.errors) == [0, 1, 2]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.text(st.sampled_from("abcdefgh \n,."), min_size=1, max_size=400), min_size=1, max_size=20),
       st.integers(800, 3000))
def test_every_prompt_within_budget(texts, limit):
    responses = [resp(i, t.strip() or "x") for i, t in enumerate(texts)]
    prompts = []

    class Recording(MockBackend):
        def generate(self, prompt, params):
            prompts.append(prompt)
            return ("oops", None) if len(prompts) % 2 else super().generate(prompt, params)

    g = Gateway(Recording(), budget=TokenBudget(limit))
    results = model_topics(responses, g.budget, g, PARAMS, parallelism=1)
    assert all(estimate_tokens(p) <= limit for p in prompts)
    members = Counter(rid for r in results for rid in r.record_ids)
    assert members == Counter(r.record_id for r in responses)


def test_batch_result_round_trip(reference_topics):
    br = TopicBatchResult(2, ("a", "b"), reference_topics, attempts=2)
    assert TopicBatchResult.from_dict(json.loads(json.dumps(br.to_dict()))) == br
