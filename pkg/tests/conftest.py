import math
from collections import Counter
from itertools import combinations

import numpy as np
import pytest

from duat.corpus import make_corpus
from duat.graph import TextGraph
from duat.synthetic import PLAIN_RULES

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_toy_corpus(rng, max_docs=6, max_words=12):
    """At most ``max_docs`` documents over at most ``max_words`` distinct words."""
    n_docs = int(rng.integers(2, max_docs + 1))
    n_words = int(rng.integers(2, max_words + 1))
    pool = [f"w{i}" for i in range(n_words)]
    texts = []
    for _ in range(n_docs):
        length = int(rng.integers(1, 26))
        texts.append(" ".join(rng.choice(pool, size=length)))
    labels = ["a", "b"] + [str(rng.choice(["a", "b"])) for _ in range(n_docs - 2)]
    splits = [str(rng.choice(["train", "test"])) for _ in range(n_docs)]
    return make_corpus(texts, splits, labels, PLAIN_RULES, min_freq=1)


def enumerate_windows(corpus, window):
    """Brute-force window lists: every window is the set of words it contains."""
    windows = []
    for doc in corpus.documents:
        toks = doc.tokens
        if len(toks) <= window:
            windows.append(set(toks))
        else:
            for s in range(len(toks) - window + 1):
                windows.append(set(toks[s:s + window]))
    return windows


def brute_force_counts(corpus, window):
    windows = enumerate_windows(corpus, window)
    single = Counter()
    pair = Counter()
    for w in windows:
        single.update(w)
        for a, b in combinations(sorted(w), 2):
            pair[(a, b)] += 1
    return len(windows), single, pair


def dense_oracle(corpus, window):
    """Adjacency built entry by entry from the piecewise definition."""
    words = corpus.vocabulary.words
    D, V = corpus.n_docs, len(words)
    A = np.zeros((D + V, D + V))
    total, single, pair = brute_force_counts(corpus, window)
    for i in range(D + V):
        A[i, i] = 1.0
    for d, doc in enumerate(corpus.documents):
        counts = Counter(doc.tokens)
        for j, w in enumerate(words):
            if counts[w]:
                df = sum(1 for other in corpus.documents if w in other.tokens)
                A[d, D + j] = A[D + j, d] = counts[w] * math.log(D / df)
    for i, wi in enumerate(words):
        for j, wj in enumerate(words):
            if i == j:
                continue
            key = (min(wi, wj), max(wi, wj))
            if pair[key] == 0:
                continue
            value = math.log((pair[key] / total) / ((single[wi] / total) * (single[wj] / total)))
            if value > 0:
                A[D + i, D + j] = value
    return A


def random_graph(rng, n, p=0.4, n_docs=None, uniform=False):
    """Symmetric random graph with self-loops of weight 1."""
    A = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < p:
                A[i, j] = A[j, i] = 1.0 if uniform else rng.uniform(0.1, 3.0)
    np.fill_diagonal(A, 1.0)
    rows, cols = np.nonzero(A)
    indptr = np.concatenate([[0], np.cumsum(np.bincount(rows, minlength=n))])
    n_docs = n // 2 if n_docs is None else n_docs
    return TextGraph(n_docs, n - n_docs, indptr, cols, A[rows, cols])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
