"""Decoder-only transformer processed block by block over cached memories.

Each layer keeps a :class:`~expirespan.expire_span.MemoryBank`.  In
``expire_span`` mode attention to cached and in-block positions is gated by
the learned ramp mask; in ``fixed_span`` mode by a hard window.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import numerics as nx
from .expire_span import (
    ConfigError,
    MemoryBank,
    SpanPredictor,
    aux_span_loss,
    in_ramp,
    masked_attention,
    prune,
    prune_window,
    ramp_mask,
)
from .numerics import Tensor

MODES = ("expire_span", "fixed_span")


@dataclass
class ModelConfig:
    vocab_size: int = 16
    n_layers: int = 2
    d_model: int = 32
    n_heads: int = 2
    d_ff: int = 64
    block_size: int = 64
    max_span: int = 512
    ramp: int = 32
    mode: str = "expire_span"
    fixed_span_length: Optional[int] = None
    dropout: float = 0.0
    scaled_variant: bool = False

    def validate(self) -> "ModelConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.block_size > self.max_span:
            raise ConfigError("block_size must not exceed max_span")
        if not (0 < self.ramp <= self.max_span):
            raise ConfigError("need 0 < ramp <= max_span")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError("dropout must be in [0, 1)")
        if self.fixed_span_length is not None and self.fixed_span_length < 0:
            raise ConfigError("fixed_span_length must be >= 0")
        return self

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def max_distance(self) -> int:
        return self.max_span + self.ramp

    def to_dict(self) -> dict:
        return asdict(self)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def attention_positions(birth: np.ndarray, block_start: int, K: int, max_distance: int) -> np.ndarray:
    """Clipped distances t - i, shape (K, M), for queries block_start..+K-1."""
    ages = (block_start + np.arange(K))[:, None] - np.asarray(birth)[None, :]
    return np.clip(ages, 0, max_distance)


@dataclass
class BlockStats:
    live: np.ndarray  # (n_layers, B): cached entries with mask > 0 at the block's first query
    resident: np.ndarray  # (n_layers,): bank size including the new block
    mean_span: float  # mean span over the new block's entries (nan in fixed mode)
    block_size: int

    @property
    def avg_mem(self) -> float:
        """Mean per-query memory size: live cached entries plus in-block prefix."""
        return float(self.live.mean() + (self.block_size + 1) / 2)

    @property
    def peak_mem(self) -> int:
        return int(self.resident.max())


@dataclass
class BlockOutput:
    logits: Tensor  # (B*K, V)
    aux_loss: Tensor
    stats: BlockStats
    masks: list = field(default_factory=list)  # per layer (B, K, M) mask values
    spans: list = field(default_factory=list)  # per layer (B, M) spans, or None


class DecoderLayer:
    """Pre-norm attention + GELU feedforward; one span predictor per layer."""

    def __init__(self, cfg: ModelConfig, index: int, rng: np.random.Generator):
        d, f = cfg.d_model, cfg.d_ff
        self.cfg = cfg
        self.index = index
        p = {}
        p["ln1.g"] = np.ones(d)
        p["ln1.b"] = np.zeros(d)
        for name in ("wq", "wk", "wv", "wo"):
            p[name] = _glorot(rng, d, d)
        p["pos_bias"] = np.zeros((cfg.n_heads, cfg.max_distance + 1))
        p["ln2.g"] = np.ones(d)
        p["ln2.b"] = np.zeros(d)
        p["ff1.w"] = _glorot(rng, d, f)
        p["ff1.b"] = np.zeros(f)
        p["ff2.w"] = _glorot(rng, f, d)
        p["ff2.b"] = np.zeros(d)
        self.p = {k: Tensor(v, requires_grad=True, name=f"layers.{index}.{k}") for k, v in p.items()}
        self.span = None
        if cfg.mode == "expire_span":
            self.span = SpanPredictor.create(d, cfg.max_span, cfg.ramp, cfg.scaled_variant)
            self.span.w.name = f"layers.{index}.span.w"
            self.span.b.name = f"layers.{index}.span.b"

    def parameters(self) -> dict:
        out = {f"layers.{self.index}.{k}": v for k, v in self.p.items()}
        if self.span is not None:
            out[f"layers.{self.index}.span.w"] = self.span.w
            out[f"layers.{self.index}.span.b"] = self.span.b
        return out


class Model:
    """Block-recurrent decoder.  Cached state lives in the banks, not here."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg.validate()
        rng = np.random.default_rng(seed)
        self.embed = Tensor(_glorot(rng, cfg.vocab_size, cfg.d_model), requires_grad=True, name="embed")
        self.layers = [DecoderLayer(cfg, i, rng) for i in range(cfg.n_layers)]
        self.ln_f = {
            "g": Tensor(np.ones(cfg.d_model), requires_grad=True, name="ln_f.g"),
            "b": Tensor(np.zeros(cfg.d_model), requires_grad=True, name="ln_f.b"),
        }
        self.out_w = Tensor(_glorot(rng, cfg.d_model, cfg.vocab_size), requires_grad=True, name="out.w")
        self.out_b = Tensor(np.zeros(cfg.vocab_size), requires_grad=True, name="out.b")
        # inference / diagnostic switches
        self.span_cap: Optional[float] = None
        self.force_unit_mask = False
        self.pruning = True

    # ------------------------------------------------------------ params

    def parameters(self) -> dict:
        out = {"embed": self.embed}
        for layer in self.layers:
            out.update(layer.parameters())
        out["ln_f.g"] = self.ln_f["g"]
        out["ln_f.b"] = self.ln_f["b"]
        out["out.w"] = self.out_w
        out["out.b"] = self.out_b
        return out

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def state_arrays(self) -> dict:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_arrays(self, arrays: dict) -> None:
        params = self.parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in params.items():
            a = np.asarray(arrays[k], dtype=float)
            if a.shape != p.shape:
                raise nx.ShapeError(f"{k}: expected {p.shape}, got {a.shape}")
            p.data = a.copy()

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    # ------------------------------------------------------------ memory

    def new_banks(self, batch: int) -> list[MemoryBank]:
        c = self.cfg
        return [MemoryBank(i, batch, c.d_model, c.n_heads, c.d_head) for i in range(c.n_layers)]

    def refresh_spans(self, banks: list[MemoryBank]) -> None:
        """Recompute cached spans with the current predictor weights."""
        if self.cfg.mode != "expire_span":
            return
        for layer, bank in zip(self.layers, banks):
            if len(bank):
                bank.spans = self._spans(layer, Tensor(bank.hidden)).data

    def prune_banks(self, banks: list[MemoryBank]) -> int:
        """Delete entries unreachable from the next block; returns total removed."""
        c = self.cfg
        start = banks[0].next_time
        if c.mode == "fixed_span":
            return sum(prune_window(b, start, c.fixed_span_length) for b in banks)
        if self.force_unit_mask:
            return sum(prune_window(b, start, c.max_distance) for b in banks)
        self.refresh_spans(banks)
        return sum(prune(b, start, c.ramp) for b in banks)

    def _spans(self, layer: DecoderLayer, h: Tensor) -> Tensor:
        e = layer.span(h)
        if self.span_cap is not None:
            e = nx.cap(e, float(self.span_cap))
        return e

    # ------------------------------------------------------------ forward

    def _structural_mask(self, ages: np.ndarray, shorten: Optional[float]) -> np.ndarray:
        c = self.cfg
        ok = ages >= 0
        if c.mode == "fixed_span":
            if c.fixed_span_length is not None:
                ok &= ages <= c.fixed_span_length
        else:
            ok &= ages <= c.max_distance
        if shorten is not None:
            ok &= ages <= shorten
        return ok.astype(float)

    def forward_block(
        self,
        banks: list[MemoryBank],
        tokens: np.ndarray,
        *,
        alpha: float = 0.0,
        train: bool = False,
        shorten: Optional[float] = None,
        rng: Optional[np.random.Generator] = None,
    ) -> BlockOutput:
        """Run one block of K positions for B streams and append it to the banks.

        Banks must already be pruned for this block (see :meth:`prune_banks`).
        """
        c = self.cfg
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        B, K = tokens.shape
        H, dh = c.n_heads, c.d_head
        start = banks[0].next_time
        if not train:
            shorten = None
        drop = c.dropout if train else 0.0

        x = nx.embedding(self.embed, tokens)
        x = nx.dropout(x, drop, rng, train)
        aux_total = Tensor(np.asarray(0.0))
        live = np.zeros((c.n_layers, B))
        resident = np.zeros(c.n_layers, dtype=np.int64)
        masks, spans_out = [], []
        new_spans = []
        scale = 1.0 / math.sqrt(dh)
        birth_new = start + np.arange(K)

        for li, (layer, bank) in enumerate(zip(self.layers, banks)):
            p = layer.p
            Mb = len(bank)
            xn = nx.layer_norm(x, p["ln1.g"], p["ln1.b"])
            flat = nx.reshape(xn, (B * K, c.d_model))

            def heads(w):
                return nx.transpose(nx.reshape(nx.matmul(flat, w), (B, K, H, dh)), (0, 2, 1, 3))

            q, k, v = heads(p["wq"]), heads(p["wk"]), heads(p["wv"])
            if Mb:
                k_all = nx.concat([Tensor(bank.keys), k], axis=2)
                v_all = nx.concat([Tensor(bank.values), v], axis=2)
                birth_all = np.concatenate([bank.birth, birth_new])
            else:
                k_all, v_all, birth_all = k, v, birth_new
            ages = (start + np.arange(K))[:, None] - birth_all[None, :]
            struct = self._structural_mask(ages, shorten)
            M = birth_all.size

            e = None
            if c.mode == "expire_span":
                h_all = nx.concat([Tensor(bank.hidden), xn], axis=1) if Mb else xn
                e = self._spans(layer, h_all)
            if e is not None and not self.force_unit_mask:
                m = nx.mul(ramp_mask(e, ages, c.ramp), struct)
                sel = in_ramp(m.data)
                aux = aux_span_loss(e, alpha, B * K, select=sel)
                aux_total = nx.add(aux_total, aux)
            else:
                m = Tensor(np.broadcast_to(struct, (B, K, M)).copy())

            dist = np.clip(ages, 0, c.max_distance)
            o = masked_attention(q, k_all, v_all, p["pos_bias"], dist, m, scale)
            o = nx.reshape(nx.transpose(o, (0, 2, 1, 3)), (B * K, c.d_model))
            o = nx.matmul(o, p["wo"])
            o = nx.dropout(nx.reshape(o, (B, K, c.d_model)), drop, rng, train)
            x = nx.add(x, o)

            xn2 = nx.layer_norm(x, p["ln2.g"], p["ln2.b"])
            hdn = nx.gelu(nx.add(nx.matmul(xn2, p["ff1.w"]), p["ff1.b"]))
            ff = nx.add(nx.matmul(hdn, p["ff2.w"]), p["ff2.b"])
            x = nx.add(x, nx.dropout(ff, drop, rng, train))

            live[li] = (m.data[:, 0, :Mb] > 0.0).sum(axis=1)
            masks.append(m.data)
            spans_out.append(None if e is None else e.data)
            bank.append(
                xn.data,
                k.data,
                v.data,
                birth_new,
                spans=None if e is None else e.data[:, Mb:],
            )
            if e is not None:
                bank.spans[:, :Mb] = e.data[:, :Mb]
                new_spans.append(e.data[:, Mb:])
            resident[li] = len(bank)

        for bank in banks:
            bank.next_time = start + K

        xf = nx.layer_norm(x, self.ln_f["g"], self.ln_f["b"])
        logits = nx.add(nx.matmul(nx.reshape(xf, (B * K, c.d_model)), self.out_w), self.out_b)
        mean_span = float(np.mean(new_spans)) if new_spans else float("nan")
        stats = BlockStats(live=live, resident=resident, mean_span=mean_span, block_size=K)
        return BlockOutput(logits=logits, aux_loss=aux_total, stats=stats, masks=masks, spans=spans_out)

    def step(self, banks, tokens, **kw) -> BlockOutput:
        """Prune (when enabled) and run one block."""
        if self.pruning:
            self.prune_banks(banks)
        elif self.cfg.mode == "expire_span":
            self.refresh_spans(banks)
        return self.forward_block(banks, tokens, **kw)


def detach_boundary(banks: list[MemoryBank]) -> None:
    """Cut every cached array loose from any tape; values stay identical.

    Banks only ever store plain arrays, so this materialises private copies
    and is otherwise a no-op kept for call-site clarity.
    """
    for bank in banks:
        for name in ("hidden", "keys", "values", "spans"):
            arr = getattr(bank, name)
            if isinstance(arr, Tensor):
                arr = arr.data
            setattr(bank, name, np.array(arr, dtype=float, copy=True))
