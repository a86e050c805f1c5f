"""Corpus ingestion: cleaning, tokenization, vocabulary and train/test splits."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

SPLITS = ("train", "test")

_NON_ALNUM = re.compile(r"[^0-9a-zA-Z]+")


class CorpusError(ValueError):
    """Base class for unusable corpus inputs."""


class LineCountMismatch(CorpusError):
    pass


class UnknownSplit(CorpusError):
    pass


class DuplicateId(CorpusError):
    pass


class EmptyVocabulary(CorpusError):
    pass


def load_stop_words(path: str | Path | None = None) -> frozenset[str]:
    """Read a one-word-per-line stop-word file; the bundled English list by default."""
    if path is None:
        text = resources.files("duat").joinpath("data/stopwords_en.txt").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    return frozenset(w.strip() for w in text.splitlines() if w.strip())


@dataclass(frozen=True)
class CleaningRules:
    """Rules applied by :func:`clean_and_tokenize`.

    With ``strip_punctuation`` every run of non-alphanumeric characters
    becomes a token boundary, so ``"state-of-the-art"`` yields four tokens
    and ``"don't"`` yields ``"don"`` and ``"t"``.
    """

    lowercase: bool = True
    strip_punctuation: bool = True
    stop_words: frozenset[str] = field(default_factory=load_stop_words)


def clean_and_tokenize(raw: str, rules: CleaningRules | None = None) -> list[str]:
    rules = rules if rules is not None else CleaningRules()
    text = raw.lower() if rules.lowercase else raw
    if rules.strip_punctuation:
        text = _NON_ALNUM.sub(" ", text)
    return [tok for tok in text.split() if tok not in rules.stop_words]


@dataclass
class Document:
    id: int
    tokens: list[str]
    label: int
    split: str


@dataclass
class Vocabulary:
    words: list[str]
    doc_freq: list[int]
    counts: list[int]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    def __contains__(self, word):
        return word in self.index

    def filter(self, tokens: Iterable[str]) -> list[str]:
        return [t for t in tokens if t in self.index]


def build_vocabulary(documents: Sequence[Sequence[str]], min_freq: int = 5) -> Vocabulary:
    """Keep words found in at least ``min_freq`` documents, sorted alphabetically."""
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    df: Counter[str] = Counter()
    total: Counter[str] = Counter()
    for tokens in documents:
        total.update(tokens)
        df.update(set(tokens))
    words = sorted(w for w, n in df.items() if n >= min_freq)
    if not words:
        raise EmptyVocabulary(f"no word appears in >= {min_freq} documents")
    return Vocabulary(words, [df[w] for w in words], [total[w] for w in words])


@dataclass
class Corpus:
    documents: list[Document]
    vocabulary: Vocabulary
    labels: list[str]

    def __post_init__(self):
        if len(self.labels) < 2:
            raise CorpusError(f"need at least 2 classes, found {len(self.labels)}")
        for i, doc in enumerate(self.documents):
            if doc.id != i:
                raise CorpusError(f"document ids must be dense 0..n-1; position {i} has id {doc.id}")

    @property
    def n_docs(self) -> int:
        return len(self.documents)

    def ids(self, split: str) -> list[int]:
        return [d.id for d in self.documents if d.split == split]

    def label_array(self) -> list[int]:
        return [d.label for d in self.documents]

    def to_json(self) -> str:
        """Canonical serialization; identical corpora give identical strings."""
        payload = {
            "labels": self.labels,
            "vocabulary": {
                "words": self.vocabulary.words,
                "doc_freq": self.vocabulary.doc_freq,
                "counts": self.vocabulary.counts,
            },
            "documents": [[d.id, d.split, d.label, d.tokens] for d in self.documents],
        }
        return json.dumps(payload, separators=(",", ":"), ensure_ascii=False)


def make_corpus(
    texts: Sequence[str],
    splits: Sequence[str],
    labels: Sequence[str],
    rules: CleaningRules | None = None,
    min_freq: int = 5,
) -> Corpus:
    """Build a corpus from in-memory texts; documents are numbered by position."""
    rules = rules if rules is not None else CleaningRules()
    label_names: list[str] = []
    label_index: dict[str, int] = {}
    for lab in labels:
        if lab not in label_index:
            label_index[lab] = len(label_names)
            label_names.append(lab)
    for s in splits:
        if s not in SPLITS:
            raise UnknownSplit(f"unknown split {s!r}")
    token_lists = [clean_and_tokenize(t, rules) for t in texts]
    vocab = build_vocabulary(token_lists, min_freq)
    docs = [
        Document(i, vocab.filter(toks), label_index[lab], split)
        for i, (toks, split, lab) in enumerate(zip(token_lists, splits, labels))
    ]
    return Corpus(docs, vocab, label_names)


def read_meta(meta_path: str | Path) -> list[tuple[int, str, str]]:
    records = []
    seen: set[int] = set()
    for lineno, line in enumerate(Path(meta_path).read_text("utf-8").splitlines(), 1):
        parts = line.rstrip("\r").split("\t")
        if len(parts) != 3:
            raise CorpusError(f"{meta_path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        raw_id, split, label = parts
        try:
            doc_id = int(raw_id)
        except ValueError:
            raise CorpusError(f"{meta_path}:{lineno}: id {raw_id!r} is not an integer") from None
        if split not in SPLITS:
            raise UnknownSplit(f"{meta_path}:{lineno}: unknown split {split!r}")
        if doc_id in seen:
            raise DuplicateId(f"{meta_path}:{lineno}: duplicate id {doc_id}")
        seen.add(doc_id)
        records.append((doc_id, split, label))
    return records


def load_corpus(
    texts_path: str | Path,
    meta_path: str | Path,
    rules: CleaningRules | None = None,
    min_freq: int = 5,
) -> Corpus:
    """Load ``<name>.texts.txt`` and ``<name>.meta.tsv`` into a :class:`Corpus`.

    Line ``i`` of the texts file belongs to line ``i`` of the meta file.  Ids
    must form the dense range ``0..n-1``; documents are stored in id order.
    """
    texts = Path(texts_path).read_text("utf-8").splitlines()
    meta = read_meta(meta_path)
    if len(texts) != len(meta):
        raise LineCountMismatch(
            f"{texts_path} has {len(texts)} lines but {meta_path} has {len(meta)}"
        )
    if sorted(r[0] for r in meta) != list(range(len(meta))):
        raise CorpusError(f"{meta_path}: ids must be exactly 0..{len(meta) - 1}")
    by_id = sorted(zip(meta, texts), key=lambda pair: pair[0][0])
    return make_corpus(
        [text for _, text in by_id],
        [rec[1] for rec, _ in by_id],
        [rec[2] for rec, _ in by_id],
        rules,
        min_freq,
    )


def write_labels(corpus: Corpus, path: str | Path) -> None:
    """Write ``id<TAB>split<TAB>label`` lines, the meta-file layout."""
    lines = [f"{d.id}\t{d.split}\t{corpus.labels[d.label]}\n" for d in corpus.documents]
    Path(path).write_text("".join(lines), encoding="utf-8")


def load_labels(path: str | Path) -> Corpus:
    """A token-free corpus carrying only ids, splits and labels."""
    meta = sorted(read_meta(path))
    if [r[0] for r in meta] != list(range(len(meta))):
        raise CorpusError(f"{path}: ids must be exactly 0..{len(meta) - 1}")
    names: list[str] = []
    index: dict[str, int] = {}
    docs = []
    for doc_id, split, label in meta:
        if label not in index:
            index[label] = len(names)
            names.append(label)
        docs.append(Document(doc_id, [], index[label], split))
    return Corpus(docs, Vocabulary([], [], []), names)
