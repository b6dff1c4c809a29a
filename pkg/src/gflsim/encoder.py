"""Two-layer bias-free ReLU encoder with explicit Jacobians.

The flat parameter layout is ``w1`` (p x hidden) row-major followed by
``w2`` (hidden x c) row-major; every Jacobian column uses that order.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numkit import softmax_rows

_SHAPE = struct.Struct("<3I")
_PACKET = struct.Struct("<2I")


@dataclass(frozen=True, eq=False)
class ModelParams:
    w1: np.ndarray
    w2: np.ndarray

    def __post_init__(self):
        w1 = np.asarray(self.w1, dtype=np.float64)
        w2 = np.asarray(self.w2, dtype=np.float64)
        if w1.ndim != 2 or w2.ndim != 2 or w1.shape[1] != w2.shape[0]:
            raise ValueError(f"incompatible layer shapes {w1.shape} and {w2.shape}")
        if not (np.isfinite(w1).all() and np.isfinite(w2).all()):
            raise ValueError("model weights must be finite")
        object.__setattr__(self, "w1", w1)
        object.__setattr__(self, "w2", w2)

    @property
    def p(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def c(self) -> int:
        return self.w2.shape[1]

    @property
    def size(self) -> int:
        return self.w1.size + self.w2.size

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.p, self.hidden, self.c

    def flat(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.w2.ravel()])

    @classmethod
    def from_flat(cls, vec, p: int, hidden: int, c: int) -> "ModelParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (p * hidden + hidden * c,):
            raise ValueError(f"flat vector has length {vec.size}, expected {p * hidden + hidden * c}")
        return cls(vec[: p * hidden].reshape(p, hidden).copy(), vec[p * hidden :].reshape(hidden, c).copy())

    @classmethod
    def glorot(cls, p: int, hidden: int, c: int, rng: np.random.Generator) -> "ModelParams":
        b1 = math.sqrt(6.0 / (p + hidden))
        b2 = math.sqrt(6.0 / (hidden + c))
        return cls(rng.uniform(-b1, b1, (p, hidden)), rng.uniform(-b2, b2, (hidden, c)))

    def step(self, grad: np.ndarray, eta: float) -> "ModelParams":
        return ModelParams.from_flat(self.flat() - eta * grad, *self.shape)

    def to_bytes(self) -> bytes:
        return _SHAPE.pack(*self.shape) + self.flat().astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "ModelParams":
        if len(buf) < _SHAPE.size:
            raise ValueError("truncated model parameters")
        p, hidden, c = _SHAPE.unpack_from(buf)
        size = p * hidden + hidden * c
        if len(buf) != _SHAPE.size + 8 * size:
            raise ValueError(f"model payload has {len(buf)} bytes, expected {_SHAPE.size + 8 * size}")
        return cls.from_flat(np.frombuffer(buf, dtype="<f8", offset=_SHAPE.size), p, hidden, c)


def _pack_pair(vec: np.ndarray, jac: np.ndarray) -> bytes:
    c, size = jac.shape
    return _PACKET.pack(c, size) + vec.astype("<f8").tobytes() + jac.astype("<f8").tobytes()


def _unpack_pair(buf: bytes) -> tuple[np.ndarray, np.ndarray]:
    if len(buf) < _PACKET.size:
        raise ValueError("truncated packet")
    c, size = _PACKET.unpack_from(buf)
    if len(buf) != _PACKET.size + 8 * c * (size + 1):
        raise ValueError("packet length does not match its header")
    vals = np.frombuffer(buf, dtype="<f8", offset=_PACKET.size)
    return vals[:c].copy(), vals[c:].reshape(c, size).copy()


@dataclass(frozen=True, eq=False)
class HiddenPacket:
    h: np.ndarray  # (c,)
    jac: np.ndarray  # (c, P)

    def to_bytes(self) -> bytes:
        return _pack_pair(self.h, self.jac)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "HiddenPacket":
        return cls(*_unpack_pair(buf))


@dataclass(frozen=True, eq=False)
class AggregatedContext:
    c_vec: np.ndarray  # (c,)
    c_jac: np.ndarray  # (c, P)

    @classmethod
    def zeros(cls, c: int, size: int) -> "AggregatedContext":
        return cls(np.zeros(c), np.zeros((c, size)))

    def to_bytes(self) -> bytes:
        return _pack_pair(self.c_vec, self.c_jac)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "AggregatedContext":
        return cls(*_unpack_pair(buf))


def _check_input(x: np.ndarray, w: ModelParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != w.p:
        raise ValueError(f"input has {x.shape[-1]} features, model expects {w.p}")
    return x


def mlp_forward(x, w: ModelParams) -> np.ndarray:
    """h = w2^T relu(w1^T x); accepts one row or a (n, p) batch."""
    x = _check_input(x, w)
    return np.maximum(x @ w.w1, 0.0) @ w.w2


def mlp_jacobian(x, w: ModelParams) -> HiddenPacket:
    x = _check_input(x, w)
    if x.ndim != 1:
        raise ValueError("mlp_jacobian takes a single feature row")
    pre = x @ w.w1
    act = np.maximum(pre, 0.0)
    gate = (pre > 0.0).astype(np.float64)
    # d h_r / d w1[i, j] = w2[j, r] * gate_j * x_i
    back = (gate[:, None] * w.w2).T  # (c, hidden)
    jac1 = back[:, None, :] * x[None, :, None]
    jac2 = np.zeros((w.c, w.hidden, w.c))
    for r in range(w.c):
        jac2[r, :, r] = act
    jac = np.concatenate([jac1.reshape(w.c, -1), jac2.reshape(w.c, -1)], axis=1)
    return HiddenPacket(act @ w.w2, jac)


def mean_packet(x, w: ModelParams) -> HiddenPacket:
    """Hidden representation and Jacobian averaged over the rows of ``x``."""
    x = _check_input(x, w)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("mean_packet needs a nonempty (n, p) batch")
    n = len(x)
    pre = x @ w.w1
    act = np.maximum(pre, 0.0)
    gate = (pre > 0.0).astype(np.float64)
    mean_act = act.sum(axis=0) / n
    mixed = x.T @ gate / n  # (p, hidden): mean of x_i * gate_j
    jac1 = mixed[None, :, :] * w.w2.T[:, None, :]
    jac2 = np.zeros((w.c, w.hidden, w.c))
    for r in range(w.c):
        jac2[r, :, r] = mean_act
    jac = np.concatenate([jac1.reshape(w.c, -1), jac2.reshape(w.c, -1)], axis=1)
    return HiddenPacket(mean_act @ w.w2, jac)


def predict_local(h, ctx: AggregatedContext, a_kk: float) -> np.ndarray:
    return softmax_rows(a_kk * np.asarray(h, dtype=np.float64) + ctx.c_vec)


def local_gradient(x, y, w: ModelParams, ctx: AggregatedContext, a_kk: float) -> np.ndarray:
    """Batch-mean biased gradient (yhat - y)^T (a_kk dh/dW + dC/dW), flat.

    ``x`` is (B, p) and ``y`` is (B, c) one-hot.  The self term is
    recomputed at ``w``; ``ctx`` stays as broadcast.
    """
    x = _check_input(x, w)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 1:
        x, y = x[None, :], y[None, :]
    if len(x) == 0:
        raise ValueError("local_gradient needs a nonempty batch")
    if y.shape != (len(x), w.c):
        raise ValueError(f"labels have shape {y.shape}, expected {(len(x), w.c)}")
    b = len(x)
    pre = x @ w.w1
    act = np.maximum(pre, 0.0)
    err = softmax_rows(a_kk * (act @ w.w2) + ctx.c_vec) - y
    g2 = (a_kk / b) * (act.T @ err)
    delta = (err @ w.w2.T) * (pre > 0.0)
    g1 = (a_kk / b) * (x.T @ delta)
    grad = np.concatenate([g1.ravel(), g2.ravel()])
    return grad + (err.sum(axis=0) / b) @ ctx.c_jac


def mlp_gradient(x, y, w: ModelParams) -> np.ndarray:
    """Plain cross-entropy gradient of Softmax(h); the no-graph baseline."""
    return local_gradient(x, y, w, AggregatedContext.zeros(w.c, w.size), 1.0)


def fedavg(params: Sequence[ModelParams]) -> ModelParams:
    if not params:
        raise ValueError("fedavg needs at least one model")
    shape = params[0].shape
    acc = params[0].flat().copy()
    for q in params[1:]:
        if q.shape != shape:
            raise ValueError(f"shape mismatch in fedavg: {q.shape} vs {shape}")
        acc += q.flat()
    return ModelParams.from_flat(acc / len(params), *shape)


def gaussian_perturb(v, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    v = np.asarray(v, dtype=np.float64)
    if sigma == 0:
        return v.copy()
    return v + sigma * rng.standard_normal(v.shape)
