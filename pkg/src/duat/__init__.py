"""Dual-attention graph convolution for text classification."""

from .corpus import CleaningRules, Corpus, Document, Vocabulary, build_vocabulary, clean_and_tokenize, load_corpus
from .graph import (
    CooccurrenceStats,
    SampledSubgraph,
    TextGraph,
    build_graph,
    collect_window_stats,
    load_graph,
    pmi,
    sample_k_hop,
    save_graph,
    tf_idf,
)
from .model import (
    DualAttentionParams,
    dual_attention_forward,
    hop_coefficients,
    init_params,
    plain_convolution_forward,
)
from .train import TrainConfig, ablate, evaluate, hop_sweep, momentum_step, train

__version__ = "0.1.0"

__all__ = [
    "CleaningRules", "Corpus", "Document", "Vocabulary", "build_vocabulary", "clean_and_tokenize", "load_corpus",
    "CooccurrenceStats", "SampledSubgraph", "TextGraph", "build_graph", "collect_window_stats", "load_graph",
    "pmi", "sample_k_hop", "save_graph", "tf_idf",
    "DualAttentionParams", "dual_attention_forward", "hop_coefficients", "init_params", "plain_convolution_forward",
    "TrainConfig", "ablate", "evaluate", "hop_sweep", "momentum_step", "train",
]
