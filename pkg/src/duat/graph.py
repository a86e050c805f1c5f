"""Heterogeneous word/document graph: co-occurrence statistics, PMI and
TF-IDF edge weights, a compact neighbor index, and fixed-fanout sampling.

Node ids put documents first (``0..n_docs-1``) followed by vocabulary words
(``n_docs..n_docs+n_words-1``).
"""

from __future__ import annotations

import math
import struct
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Corpus

GRAPH_MAGIC = b"DUATGRPH"
GRAPH_VERSION = 1
_HEADER = struct.Struct("<8sIII")
_EDGE = np.dtype([("id", "<u4"), ("w", "<f4")])


class GraphFormatError(ValueError):
    pass


@dataclass
class CooccurrenceStats:
    """Sliding-window counts over vocabulary ids.

    ``pair_keys`` holds ``i * n_words + j`` for ``i < j`` in ascending order,
    with the matching window count in ``pair_counts``.
    """

    window_size: int
    total_windows: int
    word_windows: np.ndarray
    pair_keys: np.ndarray
    pair_counts: np.ndarray

    @property
    def n_words(self) -> int:
        return len(self.word_windows)

    def pair(self, i: int, j: int) -> int:
        if i == j:
            return int(self.word_windows[i])
        if i > j:
            i, j = j, i
        key = i * self.n_words + j
        pos = np.searchsorted(self.pair_keys, key)
        if pos < len(self.pair_keys) and self.pair_keys[pos] == key:
            return int(self.pair_counts[pos])
        return 0

    def pairs(self):
        """Yield ``(i, j, count)`` for every co-occurring pair with ``i < j``."""
        rows, cols = np.divmod(self.pair_keys, self.n_words)
        for i, j, c in zip(rows.tolist(), cols.tolist(), self.pair_counts.tolist()):
            yield i, j, c


def _document_presence(ids: np.ndarray, window_size: int):
    """Per-window presence matrix for one document (windows x distinct words)."""
    uniq, local = np.unique(ids, return_inverse=True)
    n = len(ids)
    n_windows = max(1, n - window_size + 1)
    if n == 0:
        return uniq, np.zeros((1, 0), dtype=np.int64)
    onehot = np.zeros((n + 1, len(uniq)), dtype=np.int64)
    onehot[np.arange(1, n + 1), local] = 1
    cum = np.cumsum(onehot, axis=0)
    width = min(window_size, n)
    starts = np.arange(n_windows)
    in_window = cum[starts + width] - cum[starts]
    return uniq, (in_window > 0).astype(np.int64)


def collect_window_stats(corpus: Corpus, window_size: int = 20) -> CooccurrenceStats:
    """Count windows per word and per word pair.

    Windows slide inside each document; a document of length ``L`` yields
    ``max(1, L - window_size + 1)`` windows, and a word counts once per window
    however many times it occurs there.
    """
    if window_size < 1:
        raise ValueError("window_size must be >= 1")
    vocab = corpus.vocabulary
    V = len(vocab)
    word_windows = np.zeros(V, dtype=np.int64)
    total = 0
    keys_parts, count_parts = [], []
    for doc in corpus.documents:
        ids = np.fromiter((vocab.index[t] for t in doc.tokens), dtype=np.int64, count=len(doc.tokens))
        uniq, presence = _document_presence(ids, window_size)
        total += presence.shape[0]
        if len(uniq) == 0:
            continue
        co = presence.T @ presence
        word_windows[uniq] += np.diag(co)
        iu, ju = np.triu_indices(len(uniq), k=1)
        c = co[iu, ju]
        nz = c > 0
        keys_parts.append(uniq[iu[nz]] * V + uniq[ju[nz]])
        count_parts.append(c[nz])
    if keys_parts:
        keys = np.concatenate(keys_parts)
        counts = np.concatenate(count_parts)
        pair_keys, inverse = np.unique(keys, return_inverse=True)
        pair_counts = np.bincount(inverse, weights=counts).astype(np.int64)
    else:
        pair_keys = np.zeros(0, dtype=np.int64)
        pair_counts = np.zeros(0, dtype=np.int64)
    return CooccurrenceStats(window_size, total, word_windows, pair_keys, pair_counts)


def pmi(stats: CooccurrenceStats, i: int, j: int) -> float | None:
    """Natural-log PMI of two distinct words, or ``None`` when they never co-occur."""
    if i == j:
        raise ValueError("pmi is defined for distinct words only")
    wij = stats.pair(i, j)
    if wij == 0:
        return None
    return _pmi_value(wij, stats.word_windows[i], stats.word_windows[j], stats.total_windows)


def _pmi_value(wij, wi, wj, total):
    return math.log(wij * total / (float(wi) * float(wj)))


def tf_idf(corpus: Corpus, doc_id: int, word: str) -> float:
    vocab = corpus.vocabulary
    df = vocab.doc_freq[vocab.index[word]]
    n = corpus.documents[doc_id].tokens.count(word)
    if n == 0:
        return 0.0
    return n * math.log(corpus.n_docs / df)


@dataclass
class TextGraph:
    """Symmetric weighted graph stored as a CSR neighbor index.

    ``indices[indptr[v]:indptr[v + 1]]`` are the neighbors of ``v`` in
    ascending order and ``weights`` the matching edge weights.
    """

    n_docs: int
    n_words: int
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    _degree: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.indptr = np.asarray(self.indptr, dtype=np.int64)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self._degree = np.diff(self.indptr)

    @property
    def n_nodes(self) -> int:
        return self.n_docs + self.n_words

    @property
    def n_edges(self) -> int:
        return len(self.indices)

    @property
    def degree(self) -> np.ndarray:
        return self._degree

    def neighbors(self, node: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.indptr[node], self.indptr[node + 1]
        return self.indices[lo:hi], self.weights[lo:hi]

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.n_nodes, self.n_nodes))
        rows = np.repeat(np.arange(self.n_nodes), self._degree)
        dense[rows, self.indices] = self.weights
        return dense

    def equals(self, other: "TextGraph", atol: float = 0.0) -> bool:
        return (
            self.n_docs == other.n_docs
            and self.n_words == other.n_words
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
            and np.allclose(self.weights, other.weights, rtol=0.0, atol=atol)
        )


def _from_coo(n_docs, n_words, rows, cols, vals) -> TextGraph:
    n = n_docs + n_words
    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=indptr[1:])
    return TextGraph(n_docs, n_words, indptr, cols, vals)


def build_graph(corpus: Corpus, stats: CooccurrenceStats) -> TextGraph:
    """Assemble the adjacency: self-loops of weight 1, document-word TF-IDF
    edges and word-word edges with positive PMI, all stored symmetrically.

    Document-word pairs whose TF-IDF is zero (a word present in every
    document) carry no edge.
    """
    vocab = corpus.vocabulary
    D, V = corpus.n_docs, len(vocab)
    rows, cols, vals = [np.arange(D + V)], [np.arange(D + V)], [np.ones(D + V)]

    idf = np.log(D / np.asarray(vocab.doc_freq, dtype=np.float64))
    d_rows, d_cols, d_vals = [], [], []
    for doc in corpus.documents:
        for word, n in Counter(doc.tokens).items():
            w = vocab.index[word]
            val = n * idf[w]
            if val > 0:
                d_rows.append(doc.id)
                d_cols.append(D + w)
                d_vals.append(val)
    d_rows = np.asarray(d_rows, dtype=np.int64)
    d_cols = np.asarray(d_cols, dtype=np.int64)
    d_vals = np.asarray(d_vals, dtype=np.float64)
    rows += [d_rows, d_cols]
    cols += [d_cols, d_rows]
    vals += [d_vals, d_vals]

    wi, wj = np.divmod(stats.pair_keys, V)
    p = np.log(
        stats.pair_counts * float(stats.total_windows)
        / (stats.word_windows[wi].astype(np.float64) * stats.word_windows[wj])
    )
    # decide PMI > 0 on exact integer counts; a ratio of exactly 1 can round above 1
    keep = stats.pair_counts * stats.total_windows > stats.word_windows[wi] * stats.word_windows[wj]
    wi, wj, p = wi[keep] + D, wj[keep] + D, p[keep]
    rows += [wi, wj]
    cols += [wj, wi]
    vals += [p, p]

    return _from_coo(D, V, np.concatenate(rows), np.concatenate(cols), np.concatenate(vals))


def save_graph(graph: TextGraph, path: str | Path) -> None:
    """Write the little-endian binary graph format.

    Layout: header ``(magic, version, n_docs, n_words)``, then per node a
    ``u32`` count followed by ``(u32 id, f32 weight)`` pairs, then a CRC32
    of everything before it.
    """
    parts = [_HEADER.pack(GRAPH_MAGIC, GRAPH_VERSION, graph.n_docs, graph.n_words)]
    edges = np.empty(graph.n_edges, dtype=_EDGE)
    edges["id"] = graph.indices
    edges["w"] = graph.weights
    counts = graph.degree.astype("<u4")
    for v in range(graph.n_nodes):
        lo, hi = graph.indptr[v], graph.indptr[v + 1]
        parts.append(counts[v].tobytes())
        parts.append(edges[lo:hi].tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_graph(path: str | Path) -> TextGraph:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size + 4:
        raise GraphFormatError(f"{path}: file too short for header")
    magic, version, n_docs, n_words = _HEADER.unpack_from(data, 0)
    if magic != GRAPH_MAGIC:
        raise GraphFormatError(f"{path}: bad magic {magic!r}")
    if version != GRAPH_VERSION:
        raise GraphFormatError(f"{path}: unsupported version {version}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    n = n_docs + n_words
    pos = _HEADER.size
    counts = np.empty(n, dtype=np.int64)
    chunks = []
    for v in range(n):
        if pos + 4 > len(body):
            raise GraphFormatError(f"{path}: truncated at node {v}")
        (c,) = struct.unpack_from("<I", body, pos)
        pos += 4
        end = pos + c * _EDGE.itemsize
        if end > len(body):
            raise GraphFormatError(f"{path}: truncated neighbor list of node {v}")
        chunks.append(np.frombuffer(body, dtype=_EDGE, count=c, offset=pos))
        counts[v] = c
        pos = end
    if pos != len(body):
        raise GraphFormatError(f"{path}: {len(body) - pos} trailing bytes before checksum")
    if zlib.crc32(body) != crc:
        raise GraphFormatError(f"{path}: checksum mismatch")
    edges = np.concatenate(chunks) if chunks else np.empty(0, dtype=_EDGE)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return TextGraph(n_docs, n_words, indptr, edges["id"].astype(np.int64), edges["w"].astype(np.float64))


@dataclass
class SampledSubgraph:
    """Fixed-fanout neighborhoods for a batch of centers.

    ``hops[k - 1]`` has shape ``(n_centers, fanout ** k)``; slot ``t`` at hop
    ``k`` was drawn from the neighbors of slot ``t // fanout`` at hop ``k - 1``
    (hop 0 is the center).  ``edge_weights`` mirrors ``hops`` with the weight
    of the edge each slot was drawn through.
    """

    centers: np.ndarray
    fanout: int
    hops: list[np.ndarray]
    edge_weights: list[np.ndarray]
    seed: int | None = None

    @property
    def K(self) -> int:
        return len(self.hops)

    def nodes(self) -> np.ndarray:
        return np.unique(np.concatenate([self.centers] + [h.ravel() for h in self.hops]))


def sample_k_hop(
    graph: TextGraph,
    centers,
    fanout: int,
    K: int,
    seed=None,
    subgraph_size: int | None = None,
    rng: np.random.Generator | None = None,
) -> SampledSubgraph:
    """Sample ``fanout ** k`` nodes per center at each hop ``k = 1..K``.

    Draws are uniform with replacement from the previous hop's neighbor
    lists; self-loops are ordinary neighbors.  When ``subgraph_size`` is set,
    the number of distinct nodes in the batch is capped: once the cap is
    reached a draw that would add a new node is redrawn among the parent's
    neighbors already in the batch (the parent itself always qualifies).
    Draws are admitted hop by hop, round-robin over centers.
    """
    if fanout < 1:
        raise ValueError("fanout must be >= 1")
    if not 1 <= K <= 3:
        raise ValueError("K must be in 1..3")
    centers = np.asarray(centers, dtype=np.int64).reshape(-1)
    if len(centers) and (centers.min() < 0 or centers.max() >= graph.n_nodes):
        raise ValueError("center id out of range")
    if rng is None:
        rng = np.random.default_rng(seed)
    cap = subgraph_size if subgraph_size else None
    members = set(centers.tolist()) if cap else None

    hops, weights = [], []
    prev = centers.reshape(-1, 1)
    for _ in range(K):
        flat = prev.reshape(-1)
        start = graph.indptr[flat]
        deg = graph.degree[flat]
        offs = np.floor(rng.random((len(flat), fanout)) * deg[:, None]).astype(np.int64)
        pick = start[:, None] + offs
        drawn = graph.indices[pick]
        if cap is not None:
            _apply_cap(graph, flat, pick, drawn, len(centers), members, cap, rng)
        drawn = drawn.reshape(len(centers), -1)
        hops.append(drawn)
        weights.append(graph.weights[pick].reshape(len(centers), -1))
        prev = drawn
    return SampledSubgraph(centers, fanout, hops, weights, seed)


def _apply_cap(graph, parents, pick, drawn, n_centers, members, cap, rng):
    # rows of `drawn` are grouped by center (n_centers blocks); admit column-wise
    per_center = drawn.shape[0] // max(n_centers, 1)
    fanout = drawn.shape[1]
    for slot in range(per_center * fanout):
        r_off, c = divmod(slot, fanout)
        for b in range(n_centers):
            r = b * per_center + r_off
            node = int(drawn[r, c])
            if node in members:
                continue
            if len(members) < cap:
                members.add(node)
                continue
            parent = int(parents[r])
            lo = graph.indptr[parent]
            nbrs = graph.indices[lo:graph.indptr[parent + 1]]
            ok = np.flatnonzero(np.fromiter((int(x) in members for x in nbrs), dtype=bool, count=len(nbrs)))
            choice = ok[int(rng.integers(len(ok)))]
            pick[r, c] = lo + choice
            drawn[r, c] = nbrs[choice]
