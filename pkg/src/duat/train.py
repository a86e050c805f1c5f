"""Momentum-SGD training over sampled subgraphs, evaluation, hop sweep and ablation."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .corpus import Corpus
from .engine import NonFiniteError, Tape
from .graph import TextGraph, sample_k_hop
from .model import (
    DualAttentionParams,
    OneHotFeatures,
    as_features,
    dual_attention_forward,
    init_params,
    loss,
    plain_convolution_forward,
)

log = logging.getLogger(__name__)

ARMS = ("dual", "plain")


@dataclass
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    dropout: float = 0.3
    epochs: int = 300
    heads: int = 8
    dim: int = 64
    hops: int = 1
    fanout: int = 70
    batch_size: int = 10
    subgraph_size: int = 200
    l2: float = 5e-4
    seed: int = 0
    leaky_slope: float = 0.2
    arm: str = "dual"
    val_frac: float = 0.0
    eval_batch: int = 256
    loss_reduction: str = "mean"
    record_time: bool = False
    uniform_attention: bool = False

    def __post_init__(self):
        checks = [
            ("lr", self.lr >= 0),
            ("momentum", 0 <= self.momentum < 1),
            ("dropout", 0 <= self.dropout < 1),
            ("epochs", self.epochs >= 1),
            ("heads", self.heads >= 1),
            ("dim", self.dim >= 1),
            ("hops", 1 <= self.hops <= 3),
            ("fanout", self.fanout >= 1),
            ("batch_size", self.batch_size >= 1),
            ("subgraph_size", self.subgraph_size >= 0),
            ("l2", self.l2 >= 0),
            ("val_frac", 0 <= self.val_frac < 1),
            ("arm", self.arm in ARMS),
            ("loss_reduction", self.loss_reduction in ("sum", "mean")),
        ]
        for name, ok in checks:
            if not ok:
                raise ValueError(f"invalid {name}: {getattr(self, name)!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    seconds: float


@dataclass
class MetricsHistory:
    records: list[EpochRecord] = field(default_factory=list)
    val_acc: float | None = None

    def __len__(self):
        return len(self.records)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r)) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> "MetricsHistory":
        return cls([EpochRecord(**json.loads(line)) for line in text.splitlines() if line.strip()])


@dataclass
class TrainedModel:
    params: DualAttentionParams
    config: TrainConfig

    def forward(self, features, subgraph, **kw):
        if self.config.arm == "plain":
            return plain_convolution_forward(features, subgraph, self.params, **kw)
        return dual_attention_forward(
            features, subgraph, self.params, uniform_attention=self.config.uniform_attention, **kw
        )

    def predict(self, graph: TextGraph, features, ids) -> np.ndarray:
        """Class probabilities for ``ids``; sampling uses the fixed seed ``config.seed + 1``."""
        cfg = self.config
        ids = np.asarray(ids, dtype=np.int64)
        rng = np.random.default_rng(cfg.seed + 1)
        out = np.zeros((len(ids), self.params.n_classes))
        for lo in range(0, len(ids), cfg.eval_batch):
            chunk = ids[lo:lo + cfg.eval_batch]
            sub = sample_k_hop(graph, chunk, cfg.fanout, cfg.hops, rng=rng)
            out[lo:lo + len(chunk)] = self.forward(features, sub, tape=Tape(check_finite=False)).Z
        return out


def momentum_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float):
    """Classical momentum, in place: ``v = momentum * v + g``; ``p -= lr * v``."""
    for name, p in params.items():
        g = grads[name]
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        v *= momentum
        v += g
        p -= lr * v
    return params, velocity


def accuracy(probs: np.ndarray, labels) -> float:
    if len(probs) == 0:
        raise ValueError("accuracy of an empty split")
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(labels)))


def evaluate(model: TrainedModel, graph: TextGraph, features, corpus: Corpus, split: str = "test") -> float:
    """Fraction of ``split`` documents whose argmax class matches the label.

    All documents are scored in one deterministic pass, so the value matches
    the per-epoch metrics.
    """
    labels = np.asarray(corpus.label_array())
    ids = np.asarray(corpus.ids(split))
    if len(ids) == 0:
        raise ValueError(f"split {split!r} is empty")
    probs = model.predict(graph, features, np.arange(corpus.n_docs))
    return accuracy(probs[ids], labels[ids])


def _split_train(corpus: Corpus, cfg: TrainConfig):
    train_ids = np.asarray(corpus.ids("train"), dtype=np.int64)
    if len(train_ids) == 0:
        raise ValueError("corpus has no training documents")
    val_ids = np.zeros(0, dtype=np.int64)
    if cfg.val_frac > 0:
        perm = np.random.default_rng([cfg.seed, 7]).permutation(train_ids)
        n_val = int(round(cfg.val_frac * len(train_ids)))
        val_ids, train_ids = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    return train_ids, val_ids


def train(config: TrainConfig, corpus: Corpus, graph: TextGraph, features=None, progress=None):
    """Train one model; returns ``(TrainedModel, MetricsHistory)``.

    Each epoch shuffles the labeled training documents into batches of
    ``batch_size`` centers, samples a subgraph per batch, and takes one
    momentum step on the batch cross-entropy (averaged over the batch unless
    ``loss_reduction="sum"``) plus the L2 term.  Test
    documents stay in the graph but never enter the loss.
    """
    cfg = config
    features = as_features(features if features is not None else OneHotFeatures(graph.n_nodes))
    if features.n_rows != graph.n_nodes:
        raise ValueError(f"feature rows {features.n_rows} != graph nodes {graph.n_nodes}")
    if graph.n_docs != corpus.n_docs:
        raise ValueError(f"graph has {graph.n_docs} documents, corpus has {corpus.n_docs}")
    labels = np.asarray(corpus.label_array(), dtype=np.int64)
    train_ids, val_ids = _split_train(corpus, cfg)
    test_ids = np.asarray(corpus.ids("test"), dtype=np.int64)

    params = init_params(
        features.dim, cfg.dim, cfg.heads, cfg.hops, len(corpus.labels),
        seed=cfg.seed, leaky_slope=cfg.leaky_slope, l2=cfg.l2,
    )
    model = TrainedModel(params, cfg)
    velocity: dict[str, np.ndarray] = {}
    history = MetricsHistory()
    all_docs = np.arange(corpus.n_docs)

    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(train_ids)
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            centers = order[lo:lo + cfg.batch_size]
            sub = sample_k_hop(graph, centers, cfg.fanout, cfg.hops, rng=rng, subgraph_size=cfg.subgraph_size)
            tape = Tape()
            trace = model.forward(
                features, sub, train_mode=True, dropout=cfg.dropout,
                dropout_seed=int(rng.integers(2**63)), tape=tape,
            )
            batch_loss = loss(trace, labels[centers], np.ones(len(centers), dtype=bool), cfg.l2, cfg.loss_reduction)
            if not np.isfinite(batch_loss.value):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}")
            grads = tape.backward(batch_loss)
            momentum_step(params.values, grads, velocity, cfg.lr, cfg.momentum)
            losses.append(float(batch_loss.value))

        probs = model.predict(graph, features, all_docs)
        rec = EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            train_acc=accuracy(probs[train_ids], labels[train_ids]),
            test_acc=accuracy(probs[test_ids], labels[test_ids]) if len(test_ids) else 0.0,
            seconds=round(time.perf_counter() - start, 3) if cfg.record_time else 0.0,
        )
        history.records.append(rec)
        if progress is not None:
            progress(rec)
        log.debug("epoch %d loss %.4f train %.4f test %.4f", epoch, rec.train_loss, rec.train_acc, rec.test_acc)

    if len(val_ids):
        history.val_acc = accuracy(model.predict(graph, features, val_ids), labels[val_ids])
    return model, history


def hop_sweep(config: TrainConfig, corpus: Corpus, graph: TextGraph, features=None, hops_list=(1, 2, 3)):
    """Train one model per hop count with otherwise identical settings."""
    rows = []
    for K in hops_list:
        if K not in (1, 2, 3):
            raise ValueError(f"hop count {K} outside 1..3")
        model, hist = train(replace(config, hops=K), corpus, graph, features)
        last = hist.records[-1]
        rows.append({"hops": K, "fanout": config.fanout, "train_acc": last.train_acc, "test_acc": last.test_acc})
    return rows


def ablate(config: TrainConfig, corpus: Corpus, graph: TextGraph, features=None, seeds=(0,)):
    """Paired dual-attention vs plain-convolution runs, one row per (arm, seed)."""
    rows = []
    for seed in seeds:
        for arm in ARMS:
            _, hist = train(replace(config, arm=arm, seed=seed), corpus, graph, features)
            last = hist.records[-1]
            rows.append({"arm": arm, "seed": seed, "train_acc": last.train_acc, "test_acc": last.test_acc})
    return rows


def summarize_ablation(rows) -> dict[str, float]:
    return {arm: float(np.mean([r["test_acc"] for r in rows if r["arm"] == arm])) for arm in ARMS}

