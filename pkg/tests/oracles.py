"""Brute-force reference computations, written without the package's helpers."""

import math
from collections import Counter


def words_of(text):
    # independent normalizer: explicit character classes instead of regex \w tricks
    out = []
    for ch in text.lower():
        out.append(ch if (ch.isalnum() and ch != "_") else " ")
    return "".join(out).split()


def contains_phrase(doc_tokens, phrase):
    target = words_of(phrase)
    if not target:
        return False
    k = len(target)
    return any(doc_tokens[i:i + k] == target for i in range(len(doc_tokens) - k + 1))


def brute_pmi_topic(words, docs, eps):
    tokenized = [words_of(d) for d in docs]
    n = len(docs)
    distinct = []
    for w in words:
        key = " ".join(words_of(w))
        if key and key not in distinct:
            distinct.append(key)
    if len(distinct) < 2:
        return 0.0
    vals = []
    for i in range(len(distinct)):
        for j in range(i + 1, len(distinct)):
            a, b = distinct[i], distinct[j]
            ca = sum(1 for t in tokenized if contains_phrase(t, a))
            cb = sum(1 for t in tokenized if contains_phrase(t, b))
            cab = sum(1 for t in tokenized if contains_phrase(t, a) and contains_phrase(t, b))
            vals.append(math.log((cab / n + eps) / ((ca / n + eps) * (cb / n + eps))))
    return sum(vals) / len(vals)


def brute_coherence(topics, docs, eps):
    scores = [brute_pmi_topic(t["representative_words"], docs, eps) for t in topics]
    return sum(scores) / len(scores)


def bow(text):
    return Counter(words_of(text))


def bow_cosine(a, b):
    dot = sum(a[k] * b[k] for k in a if k in b)
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0 or nb == 0:
        return None
    return dot / (na * nb)


def topic_text(t):
    return " ".join([t["name"], t["description"], *t["representative_words"]])


def brute_coverage(topics, docs, theta):
    covered = 0
    for d in docs:
        sims = [bow_cosine(bow(d), bow(topic_text(t))) for t in topics]
        sims = [s for s in sims if s is not None]
        if sims and max(sims) >= theta:
            covered += 1
    return covered / len(docs)
