"""Learned memory expiration: span prediction, ramp masks, renormalized
attention, the span penalty, pruning, and memory-size accounting."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from . import numerics as nx
from ._kernels import attention_backward, attention_forward
from .numerics import Tensor


class ConfigError(ValueError):
    """Invalid hyperparameter or configuration value."""


class DegenerateAttentionError(RuntimeError):
    """A query row had no live memory to attend to."""


# ---------------------------------------------------------------- spans


@dataclass
class SpanPredictor:
    """e = L * sigmoid(w.h + b), or L * sigmoid((w.h + b) / R) when scaled."""

    w: Tensor
    b: Tensor
    L: int
    R: int
    scaled_variant: bool = False

    def __post_init__(self):
        if not (0 < self.R <= self.L):
            raise ConfigError(f"need 0 < R <= L, got R={self.R}, L={self.L}")

    @classmethod
    def create(cls, d: int, L: int, R: int, scaled_variant: bool = False) -> "SpanPredictor":
        # w = 0, b = 0: every span starts at L/2
        return cls(
            w=Tensor(np.zeros(d), requires_grad=True, name="span.w"),
            b=Tensor(np.zeros(1), requires_grad=True, name="span.b"),
            L=L,
            R=R,
            scaled_variant=scaled_variant,
        )

    def parameters(self) -> dict:
        return {"w": self.w, "b": self.b}

    def __call__(self, h) -> Tensor:
        return predict_span(self, h)


def predict_span(pred: SpanPredictor, h) -> Tensor:
    """Span for each hidden vector along the last axis of ``h``."""
    h = nx.as_tensor(h)
    if h.shape[-1] != pred.w.shape[0]:
        raise nx.ShapeError(f"hidden size {h.shape[-1]} != predictor size {pred.w.shape[0]}")
    logit = nx.add(nx.sum_(nx.mul(h, pred.w), axis=-1), pred.b if h.ndim > 1 else nx.reshape(pred.b, ()))
    if pred.scaled_variant:
        logit = nx.div(logit, float(pred.R))
    return nx.mul(float(pred.L), nx.sigmoid(logit))


def remaining_span(e, i: int, t: int):
    if t < i:
        raise ValueError(f"query time {t} precedes memory time {i}")
    return e - (t - i)


def soft_mask(r, R: float):
    """max(0, min(1, 1 + r/R)) on numbers or arrays."""
    if R <= 0:
        raise ConfigError("ramp length must be positive")
    return np.minimum(np.maximum(1.0 + np.asarray(r, dtype=float) / R, 0.0), 1.0)


def ramp_mask(spans: Tensor, ages: np.ndarray, R: float) -> Tensor:
    """Differentiable mask m[b, t, i] from spans (B, M) and ages t - i (K, M).

    Same float operations, in the same order, as :func:`soft_mask`.
    """
    B, M = spans.shape
    r = nx.sub(nx.reshape(spans, (B, 1, M)), ages.astype(float))
    return nx.clamp01ramp(nx.add(1.0, nx.div(r, float(R))))


def renormalize_attention(a, m) -> Tensor:
    """a' = m a / sum_j m a along the last axis; m broadcasts over heads."""
    a, m = nx.as_tensor(a), nx.as_tensor(m)
    p = nx.mul(a, m)
    z = nx.sum_(p, axis=-1, keepdims=True)
    if np.any(z.data == 0.0):
        raise DegenerateAttentionError("every memory of some query row is masked out")
    return nx.div(p, z)


def masked_attention(q, k, v, bias, dist: np.ndarray, mask, scale: float, return_weights: bool = False):
    """Fused softmax(q.k * scale + bias[dist]) renormalized by ``mask``.

    Shapes: q (B,H,K,dh), k/v (B,H,M,dh), bias (H,P), dist int (K,M) into
    bias columns, mask (B,K,M) shared by all heads.  Result (B,H,K,dh).
    Equivalent to ``renormalize_attention(softmax(scores), mask) @ v``.
    With ``return_weights`` the renormalized weights (B,H,K,M) come back too.
    """
    q, k, v, bias, mask = (nx.as_tensor(x) for x in (q, k, v, bias, mask))
    dist = np.ascontiguousarray(dist, dtype=np.int64)
    md = np.ascontiguousarray(mask.data)
    qd, kd, vd = (np.ascontiguousarray(x.data) for x in (q, k, v))
    out, weights, n_bad = attention_forward(qd, kd, vd, np.ascontiguousarray(bias.data), dist, md, scale)
    if n_bad:
        raise DegenerateAttentionError(f"{n_bad} query rows have no live memory")
    n_pos = bias.shape[1]

    def fn(g):
        dq, dk, dv, dbias, dmask = attention_backward(
            np.ascontiguousarray(g), qd, kd, vd, dist, md, weights, out, scale, n_pos
        )
        return dq, dk, dv, dbias, dmask

    res = nx._make(out, (q, k, v, bias, mask), fn)
    return (res, weights) if return_weights else res


# ---------------------------------------------------------------- memory


@dataclass
class MemoryEntry:
    hidden: np.ndarray
    key: np.ndarray
    value: np.ndarray
    birth_time: int
    span: float


@dataclass
class MemoryBank:
    """Cached timesteps of one layer for a batch of lockstep streams.

    Arrays hold plain values (never tape-linked): hidden (B,M,d),
    keys/values (B,H,M,dh), birth (M,), spans (B,M) as last computed.
    """

    layer: int
    batch: int
    d_model: int
    n_heads: int
    d_head: int
    hidden: np.ndarray = None
    keys: np.ndarray = None
    values: np.ndarray = None
    birth: np.ndarray = None
    spans: np.ndarray = None
    n_deleted: int = 0
    next_time: int = 0

    def __post_init__(self):
        if self.hidden is None:
            self.hidden = np.zeros((self.batch, 0, self.d_model))
            self.keys = np.zeros((self.batch, self.n_heads, 0, self.d_head))
            self.values = np.zeros((self.batch, self.n_heads, 0, self.d_head))
            self.birth = np.zeros(0, dtype=np.int64)
            self.spans = np.zeros((self.batch, 0))

    def __len__(self) -> int:
        return int(self.birth.shape[0])

    def append(self, hidden, keys, values, birth, spans=None) -> None:
        birth = np.asarray(birth, dtype=np.int64)
        if len(self) and birth.size and birth[0] <= self.birth[-1]:
            raise ValueError("birth times must increase")
        self.hidden = np.concatenate([self.hidden, np.array(hidden, dtype=float)], axis=1)
        self.keys = np.concatenate([self.keys, np.array(keys, dtype=float)], axis=2)
        self.values = np.concatenate([self.values, np.array(values, dtype=float)], axis=2)
        self.birth = np.concatenate([self.birth, birth])
        if spans is None:
            spans = np.full((self.batch, birth.size), np.nan)
        self.spans = np.concatenate([self.spans, np.array(spans, dtype=float)], axis=1)

    def keep(self, idx: np.ndarray) -> None:
        self.hidden = self.hidden[:, idx]
        self.keys = self.keys[:, :, idx]
        self.values = self.values[:, :, idx]
        self.birth = self.birth[idx]
        self.spans = self.spans[:, idx]

    def entries(self, row: int = 0) -> list[MemoryEntry]:
        return [
            MemoryEntry(
                hidden=self.hidden[row, j],
                key=self.keys[row, :, j],
                value=self.values[row, :, j],
                birth_time=int(self.birth[j]),
                span=float(self.spans[row, j]),
            )
            for j in range(len(self))
        ]

    def snapshot(self) -> "MemoryBank":
        return MemoryBank(
            layer=self.layer,
            batch=self.batch,
            d_model=self.d_model,
            n_heads=self.n_heads,
            d_head=self.d_head,
            hidden=self.hidden.copy(),
            keys=self.keys.copy(),
            values=self.values.copy(),
            birth=self.birth.copy(),
            spans=self.spans.copy(),
            n_deleted=self.n_deleted,
            next_time=self.next_time,
        )


def prune(bank: MemoryBank, block_start: int, R: float) -> int:
    """Drop entries whose mask is exactly 0 for the block's first query in
    every stream; returns the number removed.  Uses ``bank.spans``."""
    if len(bank) == 0:
        return 0
    m0 = soft_mask(bank.spans - (block_start - bank.birth)[None, :], R)
    alive = (m0 > 0.0).any(axis=0)
    removed = int(len(bank) - alive.sum())
    if removed:
        bank.keep(np.flatnonzero(alive))
        bank.n_deleted += removed
    return removed


def prune_window(bank: MemoryBank, block_start: int, span: Optional[int]) -> int:
    """Fixed-span analogue of :func:`prune`: drop entries older than ``span``."""
    if span is None or len(bank) == 0:
        return 0
    alive = (block_start - bank.birth) <= span
    removed = int(len(bank) - alive.sum())
    if removed:
        bank.keep(np.flatnonzero(alive))
        bank.n_deleted += removed
    return removed


def in_ramp(mask: np.ndarray) -> np.ndarray:
    """(B, M) flags: 0 < m < 1 for at least one query of the block."""
    return ((mask > 0.0) & (mask < 1.0)).any(axis=-2)


def aux_span_loss(spans, alpha: float, T: int, select: Optional[np.ndarray] = None) -> Tensor:
    """alpha * sum(e_i) / T over the selected (in-ramp) spans.

    ``spans`` may be a tensor with a boolean ``select`` of the same shape, or
    a plain sequence of span values.
    """
    if alpha < 0:
        raise ConfigError(f"span-loss coefficient must be >= 0, got {alpha}")
    if T <= 0:
        raise ConfigError("T must be positive")
    if not isinstance(spans, Tensor):
        vals = np.asarray(list(spans), dtype=float)
        return Tensor(np.asarray(alpha * vals.sum() / T))
    if select is None:
        select = np.ones(spans.shape, dtype=bool)
    if alpha == 0.0 or not select.any():
        return Tensor(np.asarray(0.0))
    return nx.mul(alpha / T, nx.sum_(nx.mul(spans, select.astype(float))))


# ---------------------------------------------------------------- memory size


def live_steps(e: float, R: int) -> int:
    """Number of d >= 1 with 1 + (e - d)/R > 0, i.e. queries after i that see i."""
    return int(math.ceil(e + R) - 1)


def memory_size_oracle(spans: Sequence[float], R: float, T: int) -> float:
    """(1/T) sum_t |C_t| with C_t = {i < t : m_ti > 0}, by explicit counting."""
    e = np.asarray(spans, dtype=float)
    n = e.size
    if T < n:
        raise ValueError("need T >= number of memories")
    total = 0
    idx = np.arange(n)
    for t in range(T):
        older = idx < t
        m = soft_mask(e[older] - (t - idx[older]), R)
        total += int((m > 0.0).sum())
    return total / T


def memory_size_closed_form(spans: Sequence[float], R: float, T: int) -> float:
    """R - 1 + (1/T) sum floor(e_i)."""
    e = np.asarray(spans, dtype=float)
    return R - 1 + np.floor(e).sum() / T


def export_span_trace(rows: Iterable[tuple], path_or_file) -> int:
    """Write (layer, birth_time, e_i) rows as CSV; returns the row count."""
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(fh)
        w.writerow(["layer", "birth_time", "e_i"])
        n = 0
        for layer, birth, e in rows:
            w.writerow([int(layer), int(birth), repr(float(e))])
            n += 1
        return n
    finally:
        if own:
            fh.close()
