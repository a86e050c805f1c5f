"""A small reverse-mode differentiation engine over numpy arrays.

Operations are methods of :class:`Tape`, which records each primitive with a
closure mapping the output gradient to input gradients.  ``backward`` replays
the record in reverse.  Only the primitives needed by the model exist.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

PARAM_FILE_VERSION = 1


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, name={self.name!r})"


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float64):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def dropout_mask(rng: np.random.Generator, shape, rate: float, dtype=np.float64) -> np.ndarray:
    """Inverted-dropout mask: kept entries are scaled by ``1 / (1 - rate)``."""
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / (1.0 - rate)


def _sum_squares(x: np.ndarray) -> float:
    flat = x.reshape(-1) if x.flags.c_contiguous else x.ravel(order="K")
    return float(np.dot(flat, flat))


class Tape:
    def __init__(self, check_finite: bool = True):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.params: dict[str, Tensor] = {}
        self.check_finite = check_finite
        self._done = False

    # -- leaves -----------------------------------------------------------

    def param(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            return self.params[name]
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def const(self, value) -> Tensor:
        return Tensor(np.asarray(value))

    # -- recording --------------------------------------------------------

    def _record(self, value, inputs, backward, op):
        if self._done:
            raise TapeError("tape already consumed by backward; start a new tape")
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError(f"non-finite output from {op}")
        out = Tensor(value, requires_grad=any(t.requires_grad for t in inputs))
        if out.requires_grad:
            self.records.append((out, inputs, backward))
        return out

    # -- primitives -------------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        """``np.matmul`` semantics, including batching and 1-D operands."""
        A, B = a.value, b.value
        a1, b1 = A.ndim == 1, B.ndim == 1
        A2 = A[None, :] if a1 else A
        B2 = B[:, None] if b1 else B
        try:
            out = A2 @ B2
        except ValueError as exc:
            raise ShapeError(f"matmul {A.shape} @ {B.shape}: {exc}") from None
        if b1:
            out = out[..., 0]
        if a1:
            out = out[..., 0, :] if not b1 else out[..., 0]

        def backward(g):
            G = g
            if b1:
                G = G[..., None]
            if a1:
                G = G[..., None, :]
            gA = _unbroadcast(G @ np.swapaxes(B2, -1, -2), A2.shape).reshape(A.shape)
            gB = _unbroadcast(np.swapaxes(A2, -1, -2) @ G, B2.shape).reshape(B.shape)
            return gA, gB

        return self._record(out, (a, b), backward, "matmul")

    def affine(self, x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
        """``x @ W.T + b`` with ``W`` of shape ``(out, in)``."""
        X, Wv = x.value, W.value
        if X.shape[-1] != Wv.shape[1]:
            raise ShapeError(f"affine: input width {X.shape[-1]} != weight columns {Wv.shape[1]}")
        out = X @ Wv.T
        if b is not None:
            out = out + b.value

        def backward(g):
            gx = g @ Wv
            gW = g.reshape(-1, g.shape[-1]).T @ X.reshape(-1, X.shape[-1])
            if b is None:
                return gx, gW
            return gx, gW, g.reshape(-1, g.shape[-1]).sum(axis=0)

        inputs = (x, W) if b is None else (x, W, b)
        return self._record(out, inputs, backward, "affine")

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        try:
            out = a.value + b.value
        except ValueError as exc:
            raise ShapeError(f"add {a.shape} + {b.shape}: {exc}") from None
        sa, sb = a.shape, b.shape
        return self._record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")

    def scale(self, a: Tensor, c: float) -> Tensor:
        return self._record(a.value * c, (a,), lambda g: (g * c,), "scale")

    def concat(self, tensors: list[Tensor], axis: int = -1) -> Tensor:
        values = [t.value for t in tensors]
        out = np.concatenate(values, axis=axis)
        bounds = np.cumsum([v.shape[axis] for v in values])[:-1]
        return self._record(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")

    def reshape(self, a: Tensor, shape) -> Tensor:
        src = a.shape
        return self._record(a.value.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")

    def transpose(self, a: Tensor) -> Tensor:
        return self._record(a.value.T, (a,), lambda g: (g.T,), "transpose")

    def take(self, a: Tensor, index) -> Tensor:
        """Gather along axis 0 with an integer index array of any shape."""
        idx = np.asarray(index, dtype=np.int64)
        src = a.shape

        layout = a.value

        def backward(g):
            ga = np.zeros_like(layout, dtype=g.dtype)  # keeps the source memory order
            np.add.at(ga, idx.reshape(-1), g.reshape((-1,) + src[1:]))
            return (ga,)

        return self._record(a.value[idx], (a,), backward, "take")

    def leaky_relu(self, a: Tensor, slope: float = 0.2) -> Tensor:
        x = a.value
        pos = x > 0
        out = np.where(pos, x, slope * x)
        return self._record(out, (a,), lambda g: (np.where(pos, g, slope * g),), "leaky_relu")

    def elu(self, a: Tensor, alpha: float = 1.0) -> Tensor:
        x = a.value
        pos = x > 0
        neg = alpha * np.expm1(np.minimum(x, 0.0))
        out = np.where(pos, x, neg)
        return self._record(out, (a,), lambda g: (np.where(pos, g, g * (neg + alpha)),), "elu")

    def masked_softmax(self, a: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """Softmax over the last axis restricted to ``mask``; masked slots get 0."""
        x = a.value
        if mask is not None:
            mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
            if not mask.any(axis=-1).all():
                raise ShapeError("masked_softmax: a row has an empty mask")
            x = np.where(mask, x, -np.inf)
        z = np.exp(x - x.max(axis=-1, keepdims=True))
        out = z / z.sum(axis=-1, keepdims=True)

        def backward(g):
            return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

        return self._record(out, (a,), backward, "masked_softmax")

    def dropout(self, a: Tensor, mask: np.ndarray | None) -> Tensor:
        """Multiply by a precomputed inverted-dropout mask (``None`` = eval mode)."""
        if mask is None:
            return a
        return self._record(a.value * mask, (a,), lambda g: (_unbroadcast(g * mask, a.shape),), "dropout")

    def weighted_sum(self, tensors: list[Tensor], coeffs) -> Tensor:
        coeffs = [float(c) for c in coeffs]
        if len(coeffs) != len(tensors):
            raise ShapeError("weighted_sum: one coefficient per tensor")
        out = sum(c * t.value for c, t in zip(coeffs, tensors))
        return self._record(out, tuple(tensors), lambda g: tuple(c * g for c in coeffs), "weighted_sum")

    def cross_entropy(self, logits: Tensor, targets) -> Tensor:
        """Summed ``-log softmax(logits)[row, target]`` over rows."""
        x = logits.value
        t = np.asarray(targets, dtype=np.int64)
        if x.ndim != 2 or t.shape != (x.shape[0],):
            raise ShapeError(f"cross_entropy: logits {x.shape} vs targets {t.shape}")
        shifted = x - x.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1))
        rows = np.arange(len(t))
        loss = np.sum(lse - shifted[rows, t])

        def backward(g):
            p = np.exp(shifted - lse[:, None])
            p[rows, t] -= 1.0
            return (g * p,)

        return self._record(np.asarray(loss), (logits,), backward, "cross_entropy")

    def l2_penalty(self, tensors: list[Tensor] | None = None) -> Tensor:
        """Sum of squares over the given tensors (default: every registered parameter)."""
        tensors = list(self.params.values()) if tensors is None else tensors
        total = np.asarray(sum(_sum_squares(t.value) for t in tensors))
        return self._record(total, tuple(tensors), lambda g: tuple(t.value * (2.0 * g) for t in tensors), "l2")

    def sum(self, a: Tensor) -> Tensor:
        shape = a.shape
        return self._record(np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")

    # -- backward ---------------------------------------------------------

    def backward(self, output: Tensor, output_gradient=None) -> dict[str, np.ndarray]:
        """Propagate gradients from ``output``; returns one array per parameter."""
        if self._done:
            raise TapeError("backward already ran on this tape")
        if not self.records and not self.params:
            raise TapeError("backward called before any forward computation")
        self._done = True
        if output_gradient is None:
            if output.value.size != 1:
                raise ShapeError("output_gradient is required for non-scalar outputs")
            output_gradient = np.ones_like(output.value)
        output.grad = np.asarray(output_gradient, dtype=output.value.dtype)
        # a gradient array handed over by a closure may be shared with another
        # input, so it is copied before the first in-place accumulation
        owned: set[int] = set()
        for out, inputs, backward in reversed(self.records):
            if out.grad is None:
                continue
            for inp, g in zip(inputs, backward(out.grad)):
                if not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = g
                elif id(inp) in owned:
                    inp.grad += g
                else:
                    inp.grad = inp.grad + g
                    owned.add(id(inp))
            out.grad = None
        return {
            name: (t.grad if t.grad is not None else np.zeros_like(t.value))
            for name, t in self.params.items()
        }


# -- gradient checking ------------------------------------------------------

LossFn = Callable[[Tape, Mapping[str, np.ndarray]], Tensor]


def analytic_gradients(fn: LossFn, params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    tape = Tape()
    loss = fn(tape, params)
    grads = tape.backward(loss)
    return {name: grads.get(name, np.zeros_like(v)) for name, v in params.items()}


def numeric_gradients(fn: LossFn, params: Mapping[str, np.ndarray], epsilon: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences, perturbing each parameter entry in place."""
    out = {}
    for name, value in params.items():
        grad = np.zeros_like(value, dtype=np.float64)
        flat = value.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            plus = float(fn(Tape(), params).value)
            flat[i] = orig - epsilon
            minus = float(fn(Tape(), params).value)
            flat[i] = orig
            gflat[i] = (plus - minus) / (2.0 * epsilon)
        out[name] = grad
    return out


def max_relative_error(analytic: Mapping[str, np.ndarray], numeric: Mapping[str, np.ndarray]) -> float:
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        if a.size == 0:
            continue
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def grad_check(fn: LossFn, params: Mapping[str, np.ndarray], epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn(tape, params)`` must build a scalar loss on ``tape`` and register
    every entry of ``params`` through ``tape.param``; it must be
    deterministic (no dropout).
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-6, 1e-3]")
    if not params:
        return 0.0
    return max_relative_error(analytic_gradients(fn, params), numeric_gradients(fn, params, epsilon))


# -- parameter files --------------------------------------------------------


class ParamFormatError(ValueError):
    pass


def encode_params(params: Mapping[str, np.ndarray]) -> bytes:
    """Binary parameter payload: ``(version, count)`` header, then per
    parameter ``(name length, name, ndim, dims..., f32 values)``, then CRC32."""
    parts = [struct.pack("<II", PARAM_FILE_VERSION, len(params))]
    for name, value in params.items():
        raw = name.encode("utf-8")
        value = np.asarray(value)
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_params(data: bytes) -> dict[str, np.ndarray]:
    if len(data) < 12:
        raise ParamFormatError("parameter payload too short")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ParamFormatError("parameter checksum mismatch")
    version, count = struct.unpack_from("<II", body, 0)
    if version != PARAM_FILE_VERSION:
        raise ParamFormatError(f"unsupported parameter file version {version}")
    pos = 8
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<I", body, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(body):
                raise ParamFormatError(f"truncated payload for {name!r}")
            out[name] = np.frombuffer(body, dtype="<f4", count=size, offset=pos).astype(np.float64).reshape(shape)
            pos += 4 * size
    except struct.error as exc:
        raise ParamFormatError(f"truncated parameter payload: {exc}") from None
    if pos != len(body):
        raise ParamFormatError("trailing bytes in parameter payload")
    return out


def save_params(params: Mapping[str, np.ndarray], path: str | Path) -> None:
    Path(path).write_bytes(encode_params(params))


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    return decode_params(Path(path).read_bytes())
