"""Dual-attention layer: per-hop connection attention, fixed hop weights,
multi-head concatenation and a softmax classifier on top.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import Tape, Tensor, ShapeError, decode_params, dropout_mask, encode_params, glorot_uniform
from .graph import SampledSubgraph

MODEL_MAGIC = b"DUATMODL"
ACTIVATIONS = ("elu", "identity")


def hop_coefficients(c: int) -> np.ndarray:
    """Softmax of ``1 - (k - 1) / c`` for ``k = 1..c``."""
    if c < 1:
        raise ValueError("hop count must be >= 1")
    raw = 1.0 - np.arange(c) / c
    z = np.exp(raw - raw.max())
    return z / z.sum()


@dataclass
class HeadParams:
    W: np.ndarray  # (d_out, d)
    a: np.ndarray  # (2 * d_out,)


@dataclass
class DualAttentionParams:
    """All trainable arrays plus the fixed layer settings.

    Arrays live in ``values`` under the names ``head{m}.W``, ``head{m}.a``,
    ``cls.W`` and ``cls.b``; the optimizer updates them in place.
    """

    values: dict[str, np.ndarray]
    d: int
    d_out: int
    n_heads: int
    hops: int
    n_classes: int
    leaky_slope: float = 0.2
    activation: str = "elu"
    l2: float = 5e-4
    q: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.q is None:
            self.q = hop_coefficients(self.hops)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def heads(self) -> list[HeadParams]:
        return [HeadParams(self.values[f"head{m}.W"], self.values[f"head{m}.a"]) for m in range(self.n_heads)]

    def header(self) -> dict:
        return {
            "d": self.d, "d_out": self.d_out, "heads": self.n_heads, "hops": self.hops,
            "classes": self.n_classes, "leaky_slope": self.leaky_slope,
            "activation": self.activation, "l2": self.l2,
        }


def init_params(
    d: int,
    d_out: int,
    n_heads: int,
    hops: int,
    n_classes: int,
    seed=0,
    leaky_slope: float = 0.2,
    activation: str = "elu",
    l2: float = 5e-4,
) -> DualAttentionParams:
    rng = np.random.default_rng(seed)
    values = {}
    for m in range(n_heads):
        values[f"head{m}.W"] = glorot_uniform(rng, (d_out, d), d, d_out)
        values[f"head{m}.a"] = glorot_uniform(rng, (2 * d_out,), 2 * d_out, 1)
    values["cls.W"] = glorot_uniform(rng, (n_classes, n_heads * d_out), n_heads * d_out, n_classes)
    values["cls.b"] = np.zeros(n_classes)
    return DualAttentionParams(values, d, d_out, n_heads, hops, n_classes, leaky_slope, activation, l2)


def save_model(params: DualAttentionParams, path: str | Path, extra: dict | None = None) -> None:
    """Model file: magic, JSON header length + header, then the engine parameter payload."""
    header = params.header()
    if extra:
        header["extra"] = extra
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    Path(path).write_bytes(MODEL_MAGIC + struct.pack("<I", len(raw)) + raw + encode_params(params.values))


def load_model(path: str | Path) -> tuple[DualAttentionParams, dict]:
    data = Path(path).read_bytes()
    if data[:8] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    (n,) = struct.unpack_from("<I", data, 8)
    header = json.loads(data[12:12 + n].decode("utf-8"))
    values = decode_params(data[12 + n:])
    params = DualAttentionParams(
        values, header["d"], header["d_out"], header["heads"], header["hops"], header["classes"],
        header["leaky_slope"], header["activation"], header["l2"],
    )
    return params, header.get("extra", {})


# -- node features ------------------------------------------------------------


class OneHotFeatures:
    """Identity feature matrix over ``n`` nodes, never materialized.

    Transforming a one-hot row by ``W`` selects a column of ``W``, so the
    transform is a gather; input dropout drops whole rows, which is what
    elementwise dropout of a one-hot row amounts to.
    """

    def __init__(self, n: int):
        self.n_rows = n
        self.dim = n

    def dense(self) -> np.ndarray:
        return np.eye(self.n_rows)

    def input_mask(self, rng, nodes, rate):
        return dropout_mask(rng, (len(nodes), 1), rate)

    def transform(self, tape: Tape, W: Tensor, nodes: np.ndarray, mask) -> Tensor:
        return tape.dropout(tape.take(tape.transpose(W), nodes), mask)


class DenseFeatures:
    def __init__(self, matrix: np.ndarray):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.n_rows, self.dim = self.matrix.shape

    def dense(self) -> np.ndarray:
        return self.matrix

    def input_mask(self, rng, nodes, rate):
        return dropout_mask(rng, (len(nodes), self.dim), rate)

    def transform(self, tape: Tape, W: Tensor, nodes: np.ndarray, mask) -> Tensor:
        x = tape.dropout(tape.const(self.matrix[nodes]), mask)
        return tape.affine(x, W)


def as_features(features) -> OneHotFeatures | DenseFeatures:
    if isinstance(features, (OneHotFeatures, DenseFeatures)):
        return features
    return DenseFeatures(features)


def load_features(path: str | Path) -> DenseFeatures:
    """Read a node-feature matrix from ``.npy`` or whitespace-separated text."""
    path = Path(path)
    if path.suffix == ".npy":
        return DenseFeatures(np.load(path))
    return DenseFeatures(np.loadtxt(path, ndmin=2))


# -- layer pieces ---------------------------------------------------------------


@dataclass
class ForwardTrace:
    tape: Tape
    centers: np.ndarray
    scores: list[list[np.ndarray]]  # [head][hop] raw e, (B, L_k)
    alpha: list[list[np.ndarray]]  # [head][hop] normalized coefficients
    hop_features: list[list[np.ndarray]]  # [head][hop] h^(k), (B, d_out)
    mixed: list[np.ndarray]  # [head] sum_k q_k h^(k)
    h_new: np.ndarray  # (B, heads * d_out)
    logits: Tensor
    Z: np.ndarray


def _activate(tape: Tape, x: Tensor, activation: str) -> Tensor:
    return tape.elu(x) if activation == "elu" else x


def connection_attention(
    tape: Tape,
    H: Tensor,
    a: Tensor,
    center_rows: np.ndarray,
    neighbor_rows: np.ndarray,
    leaky_slope: float = 0.2,
) -> tuple[Tensor, Tensor]:
    """Scores ``LeakyReLU(a . [h_i || h_j])`` and their softmax per center.

    ``H`` holds transformed features indexed by local row; ``neighbor_rows``
    is ``(B, L)``.  Repeated neighbors keep separate slots.  The dot product
    with the concatenation is split into its two halves, ``a[:d]`` on the
    center and ``a[d:]`` on the neighbor.
    """
    d_out = H.shape[1]
    src = tape.matmul(H, tape.take(a, np.arange(d_out)))
    dst = tape.matmul(H, tape.take(a, np.arange(d_out, 2 * d_out)))
    B = len(center_rows)
    e = tape.leaky_relu(
        tape.add(tape.reshape(tape.take(src, center_rows), (B, 1)), tape.take(dst, neighbor_rows)),
        leaky_slope,
    )
    return e, tape.masked_softmax(e)


def aggregate_hop(
    tape: Tape,
    alpha: Tensor,
    H: Tensor,
    neighbor_rows: np.ndarray,
    activation: str = "elu",
) -> Tensor:
    """``activation(sum_j alpha_ij h_j)`` per center."""
    B, L = neighbor_rows.shape
    values = tape.take(H, neighbor_rows)
    pooled = tape.matmul(tape.reshape(alpha, (B, 1, L)), values)
    return _activate(tape, tape.reshape(pooled, (B, H.shape[1])), activation)


def _localize(subgraph: SampledSubgraph):
    nodes = subgraph.nodes()
    center_rows = np.searchsorted(nodes, subgraph.centers)
    hop_rows = [np.searchsorted(nodes, h) for h in subgraph.hops]
    return nodes, center_rows, hop_rows


def _check(features, subgraph, params):
    if features.dim != params.d:
        raise ShapeError(f"feature dimension {features.dim} != model input dimension {params.d}")
    if subgraph.K < params.hops:
        raise ShapeError(f"subgraph has {subgraph.K} hops but the model uses {params.hops}")


def _forward(features, subgraph, params, train_mode, dropout, dropout_seed, tape, attention: str):
    features = as_features(features)
    _check(features, subgraph, params)
    tape = tape if tape is not None else Tape()
    nodes, center_rows, hop_rows = _localize(subgraph)
    B = len(center_rows)
    rng = np.random.default_rng(dropout_seed)
    use_dropout = train_mode and dropout > 0
    in_mask = features.input_mask(rng, nodes, dropout) if use_dropout else None

    tp = {name: tape.param(name, v) for name, v in params.values.items()}
    c = params.hops
    q = params.q if attention != "edge" else np.full(c, 1.0 / c)
    fixed = []
    for k in range(c):
        w = subgraph.edge_weights[k] if attention == "edge" else np.ones_like(subgraph.edge_weights[k])
        fixed.append(tape.const(w / w.sum(axis=1, keepdims=True)))

    scores, alphas, hop_feats, mixed, head_out = [], [], [], [], []
    for m in range(params.n_heads):
        H = features.transform(tape, tp[f"head{m}.W"], nodes, in_mask)
        s_m, a_m, h_m = [], [], []
        for k in range(c):
            if attention == "learned":
                e, alpha = connection_attention(tape, H, tp[f"head{m}.a"], center_rows, hop_rows[k], params.leaky_slope)
                s_m.append(e.value)
            else:
                alpha = fixed[k]
            a_m.append(alpha.value)
            if use_dropout:
                alpha = tape.dropout(alpha, dropout_mask(rng, alpha.shape, dropout))
            h = aggregate_hop(tape, alpha, H, hop_rows[k], params.activation)
            h_m.append(h)
        mix = tape.weighted_sum(h_m, q)
        scores.append(s_m)
        alphas.append(a_m)
        hop_feats.append([h.value for h in h_m])
        mixed.append(mix.value)
        head_out.append(mix)

    h_new = tape.concat(head_out, axis=-1)
    logits = tape.affine(h_new, tp["cls.W"], tp["cls.b"])
    z = np.exp(logits.value - logits.value.max(axis=1, keepdims=True))
    Z = z / z.sum(axis=1, keepdims=True)
    assert h_new.shape == (B, params.n_heads * params.d_out)
    return ForwardTrace(tape, subgraph.centers, scores, alphas, hop_feats, mixed, h_new.value, logits, Z)


def dual_attention_forward(
    features,
    subgraph: SampledSubgraph,
    params: DualAttentionParams,
    train_mode: bool = False,
    dropout_seed=None,
    dropout: float = 0.0,
    tape: Tape | None = None,
    uniform_attention: bool = False,
) -> ForwardTrace:
    """Run the layer for the centers of ``subgraph``.

    Per head: transform features, attend over each hop's sampled list,
    activate, mix hops with ``params.q``; then concatenate heads and apply the
    affine classifier.  In train mode dropout hits the input features and the
    attention coefficients.  ``uniform_attention`` pins every coefficient to
    ``1/len(list)``, which isolates the contribution of learned scores.
    """
    mode = "uniform" if uniform_attention else "learned"
    return _forward(features, subgraph, params, train_mode, dropout, dropout_seed, tape, attention=mode)


def plain_convolution_forward(
    features,
    subgraph: SampledSubgraph,
    params: DualAttentionParams,
    train_mode: bool = False,
    dropout_seed=None,
    dropout: float = 0.0,
    tape: Tape | None = None,
) -> ForwardTrace:
    """Ablation arm: attention replaced by the sampled edges' weights
    normalized per neighborhood, hops averaged uniformly.  The attention
    vectors are unused; dropout is applied to the fixed coefficients exactly
    as it is to learned ones."""
    return _forward(features, subgraph, params, train_mode, dropout, dropout_seed, tape, attention="edge")


def loss(
    trace: ForwardTrace,
    labels,
    labeled_mask,
    l2: float,
    reduction: str = "sum",
) -> Tensor:
    """Cross-entropy over the masked rows plus ``l2`` times the sum of squares
    of every parameter registered on the trace's tape.

    ``reduction="mean"`` divides the cross-entropy (not the penalty) by the
    number of masked rows.
    """
    tape = trace.tape
    labeled_mask = np.asarray(labeled_mask, dtype=bool)
    rows = np.flatnonzero(labeled_mask)
    if len(rows) == 0:
        raise ValueError("loss needs at least one labeled row")
    labels = np.asarray(labels, dtype=np.int64)
    ce = tape.cross_entropy(tape.take(trace.logits, rows), labels[rows])
    if reduction == "mean":
        ce = tape.scale(ce, 1.0 / len(rows))
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    if l2 == 0:
        return ce
    return tape.add(ce, tape.scale(tape.l2_penalty(), l2))
