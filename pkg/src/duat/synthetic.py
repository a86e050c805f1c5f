"""Small generated corpora for tests and desk-scale experiments."""

from __future__ import annotations

import numpy as np

from .corpus import CleaningRules, Corpus, make_corpus

PLAIN_RULES = CleaningRules(stop_words=frozenset())


def separable_corpus(n_docs: int = 40, words_per_class: int = 10, doc_len: int = 12, seed: int = 0) -> Corpus:
    """Two classes with disjoint vocabularies; even positions train, odd test."""
    rng = np.random.default_rng(seed)
    vocab = [[f"{c}word{i}" for i in range(words_per_class)] for c in ("x", "y")]
    texts, splits, labels = [], [], []
    for i in range(n_docs):
        cls = i % 4 // 2  # pairs (train, test) alternate between classes
        texts.append(" ".join(rng.choice(vocab[cls], size=doc_len)))
        splits.append("train" if i % 2 == 0 else "test")
        labels.append(("pos", "neg")[cls])
    return make_corpus(texts, splits, labels, PLAIN_RULES, min_freq=1)


def cooccurrence_corpus(
    n_docs: int = 200,
    n_classes: int = 2,
    topic_words: int = 4,
    noise_words: int = 300,
    doc_len: int = 24,
    signal_tokens: int = 2,
    seed: int = 0,
) -> Corpus:
    """Class evidence carried by a few frequent, mutually co-occurring topic words.

    Each class owns ``topic_words`` words that recur across its documents
    (high document frequency, so low IDF) and co-occur with each other,
    giving them positive-PMI word-word edges.  The rest of every document
    comes from a large shared pool of rare noise words whose high IDF gives
    them the largest TF-IDF edge weights.  Fixed edge weights therefore
    emphasize the uninformative neighbors; a model has to learn which
    neighbors matter.
    """
    rng = np.random.default_rng(seed)
    topics = [[f"t{c}w{i}" for i in range(topic_words)] for c in range(n_classes)]
    noise = [f"n{i}" for i in range(noise_words)]
    texts, splits, labels = [], [], []
    for i in range(n_docs):
        cls = int(rng.integers(n_classes))
        toks = list(rng.choice(noise, size=doc_len - signal_tokens))
        for s in rng.choice(topics[cls], size=signal_tokens):
            toks.insert(int(rng.integers(len(toks) + 1)), s)
        texts.append(" ".join(toks))
        splits.append("train" if i % 2 == 0 else "test")
        labels.append(f"class{cls}")
    return make_corpus(texts, splits, labels, PLAIN_RULES, min_freq=1)
