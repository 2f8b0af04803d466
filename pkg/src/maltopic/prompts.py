"""Prompt templates for the three agents.

The section headers below double as the shape markers the offline mock
backend keys on, so change them together with ``llm.MockBackend``.
"""

from __future__ import annotations

import json
from typing import Mapping, Sequence

DEFAULT_SURVEY_CONTEXT = (
    "The answers below come from a survey of technology workers about how AI tools affect their work."
)

ENRICH_MARKER = "Rewrite the free-text answer"
ENRICH_HEADER = "Respondent:"
ENRICH_FOOTER = "Enriched response:"

ENRICHMENT_TEMPLATE = """You help analyze survey responses.

Your task: {survey_context} {marker} {column} so that it also reflects the respondent's \
{context_description}. Add that context only where it helps the answer stand on its own. \
Maintain the original sentiment and meaning of the response. Do not add opinions, assumptions, \
conclusions or extrapolations that the original answer does not contain. Use plain, neutral \
wording. Reply with the rewritten answer only.

{header}
{context_lines}
{column}: {response}

{footer}"""

TOPIC_HEADER = "Survey responses:"
TOPIC_FOOTER = "Topics (JSON array):"

TOPIC_TEMPLATE = """You help analyze survey responses.

Your task: below are {count} survey responses, each already enriched with context about the \
respondent. Identify unique, non-overlapping and exhaustive topics across all of them. \
For every topic provide:
- Topic Name: a short, descriptive name
- Description: one line summarizing what the topic covers
- Respondent Profile: which kinds of respondents raise this topic most
- Representative words: the top words or short phrases that characterize the topic

Output format: respond with only a JSON array. Each element is an object with exactly the keys \
"name", "description", "respondent_profile" and "representative_words" \
(a list of strings). Do not add any other text.

{header}
{responses}

{footer}"""

DEDUP_HEADER = "Topic lists:"
DEDUP_FOOTER = "Merged topics (JSON array):"

DEDUP_TEMPLATE = """You help analyze survey responses.

Your task: the topic lists below were extracted from separate batches of the same survey. \
Merge them into one list of unique, non-overlapping topics. Combine topics that describe the \
same theme, and rewrite the description and respondent profile of a merged topic so they cover \
all of its sources. Keep topics that have no duplicate as they are.

Output format: respond with only a JSON array. Each element is an object with the keys \
"name", "description", "respondent_profile", "representative_words" (a list of strings) and \
"source_topics" (the exact names of every input topic merged into it). Every input topic must \
appear in exactly one "source_topics" list. Do not add any other text.

{header}
{topic_lists}

{footer}"""

REPAIR_REMINDER = (
    "\n\nReminder: the previous answer could not be parsed. Respond with only the JSON array "
    "in the format described above, with no surrounding text."
)


def humanize(field_name: str) -> str:
    return field_name.replace("_", " ").strip()


def render_enrichment(
    column: str,
    response: str,
    context: Sequence[tuple[str, str]],
    survey_context: str = DEFAULT_SURVEY_CONTEXT,
) -> str:
    names = [humanize(name) for name, _ in context]
    if len(names) > 1:
        description = ", ".join(names[:-1]) + " and " + names[-1]
    else:
        description = names[0] if names else "profile"
    return ENRICHMENT_TEMPLATE.format(
        survey_context=survey_context,
        marker=ENRICH_MARKER,
        header=ENRICH_HEADER,
        column=column,
        context_description=description,
        context_lines="\n".join(f"{name}: {value}" for name, value in context),
        response=response,
        footer=ENRICH_FOOTER,
    )


def render_topic_prompt(texts: Sequence[str]) -> str:
    return TOPIC_TEMPLATE.format(
        count=len(texts),
        header=TOPIC_HEADER,
        responses="\n".join(numbered_line(i, t) for i, t in enumerate(texts, start=1)),
        footer=TOPIC_FOOTER,
    )


def numbered_line(number: int, text: str) -> str:
    # keep one response per line so the numbering stays unambiguous
    return f"[{number}] " + " ".join(text.split())


def render_dedup_prompt(batches: Sequence[tuple[int, Sequence[Mapping]]]) -> str:
    blocks = [
        json.dumps({"batch": index, "topics": list(topics)}, ensure_ascii=False)
        for index, topics in batches
    ]
    return DEDUP_TEMPLATE.format(
        header=DEDUP_HEADER, topic_lists="\n".join(blocks), footer=DEDUP_FOOTER
    )
