"""Optimisation: Adam with warmup + cosine decay, clipping, the total loss
with span penalty, random memory shortening, and the block-wise loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import numerics as nx
from .expire_span import ConfigError
from .metrics import LN2, MemoryMeter, MetricsCSV, RunMetrics, answer_accuracy
from .numerics import Tape, Tensor
from .transformer import Model, detach_boundary

log = logging.getLogger(__name__)


class NumericHalt(RuntimeError):
    """Training stopped on a non-finite loss; ``diagnostics`` holds the last block."""

    def __init__(self, msg, diagnostics=None):
        super().__init__(msg)
        self.diagnostics = diagnostics or {}


@dataclass
class TrainConfig:
    alpha: float = 1e-6
    lr: float = 1e-3
    warmup_steps: int = 100
    total_steps: int = 1000
    clip_norm: float = 1.0
    batch_size: int = 8
    seed: int = 0
    random_shorten: bool = False
    eval_interval: int = 200
    eval_blocks: int = 40
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> "TrainConfig":
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be > 0")
        if not (0 <= self.warmup_steps <= self.total_steps):
            raise ConfigError("need 0 <= warmup_steps <= total_steps")
        if self.batch_size < 1 or self.eval_interval < 1:
            raise ConfigError("batch_size and eval_interval must be >= 1")
        return self


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    skipped: int = 0


def total_loss(task_loss: Tensor, span_loss: Tensor) -> Tensor:
    """Task loss plus the already-scaled span penalty."""
    out = nx.add(task_loss, span_loss)
    if not np.isfinite(out.data).all():
        raise NumericHalt(f"non-finite loss (task={float(task_loss.data)}, span={float(span_loss.data)})")
    return out


def sample_shorten(L: float, rng: np.random.Generator) -> float:
    """Random attention limit l ~ U(0, L) for one training batch."""
    return float(rng.uniform(0.0, L))


def lr_at_step(step: int, cfg: TrainConfig) -> float:
    if step < 0 or step > cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    if span == 0:
        return cfg.lr
    progress = (step - cfg.warmup_steps) / span
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def adam_step(
    params: dict,
    grads: dict,
    state: OptimState,
    lr: float,
    clip_norm: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> bool:
    """Clip by global norm, then one bias-corrected Adam update.

    Returns False (and counts a skip) when a gradient is not finite.
    """
    norm = global_norm(grads)
    if not math.isfinite(norm):
        state.skipped += 1
        log.warning("non-finite gradient, step skipped (%d so far)", state.skipped)
        return False
    scale = clip_norm / norm if norm > clip_norm else 1.0
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif scale != 1.0:
            g = g * scale
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return True


@dataclass
class StepResult:
    task_loss: float
    span_loss: float
    stats: object
    seconds: float


def train_step(model: Model, banks, block, cfg: TrainConfig, state: OptimState, lr: float, rng) -> StepResult:
    t0 = time.perf_counter()
    shorten = sample_shorten(model.cfg.max_span, rng) if cfg.random_shorten else None
    model.zero_grad()
    if model.pruning:
        model.prune_banks(banks)
    else:
        model.refresh_spans(banks)
    with Tape():
        out = model.forward_block(banks, block.inputs, alpha=cfg.alpha, train=True, shorten=shorten, rng=rng)
        task = nx.cross_entropy(out.logits, block.targets.reshape(-1), block.mask.reshape(-1))
        try:
            loss = total_loss(task, out.aux_loss)
        except NumericHalt as exc:
            exc.diagnostics = {
                "spans": out.spans,
                "masks": out.masks,
                "task_loss": float(task.data),
                "span_loss": float(out.aux_loss.data),
            }
            raise
        if loss.requires_grad:
            loss.backward()
    params = model.parameters()
    grads = {k: p.grad for k, p in params.items() if p.grad is not None}
    adam_step(params, grads, state, lr, cfg.clip_norm, cfg.beta1, cfg.beta2, cfg.adam_eps)
    detach_boundary(banks)
    return StepResult(float(task.data), float(out.aux_loss.data), out.stats, time.perf_counter() - t0)


def evaluate(model: Model, stream, n_blocks: int, byte_level: bool = False) -> dict:
    """Forward-only pass over ``n_blocks`` fresh blocks with empty banks."""
    banks = model.new_banks(stream.batch)
    meter = MemoryMeter()
    nll_sum, n_tok, correct = 0.0, 0, 0
    per_sample: dict[int, list] = {}
    for _ in range(n_blocks):
        block = stream.next_block()
        out = model.step(banks, block.inputs)
        logits = out.logits.data
        tgt = block.targets.reshape(-1)
        msk = block.mask.reshape(-1)
        z = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        nll = lse - z[np.arange(len(tgt)), tgt]
        pred = logits.argmax(axis=1)
        hit = (pred == tgt) & msk
        nll_sum += float(nll[msk].sum())
        n_tok += int(msk.sum())
        correct += int(hit.sum())
        ids = block.sample_ids.reshape(-1)
        for sid, h in zip(ids[msk], hit[msk]):
            rec = per_sample.setdefault(int(sid), [0, 0])
            rec[0] += int(h)
            rec[1] += 1
        meter.add(out.stats)
    avg_mem, peak_mem, avg_span = meter.result()
    loss = nll_sum / max(n_tok, 1)
    expected = getattr(stream, "answer_counts", {})
    seq_acc, n_seq = answer_accuracy(per_sample, expected) if expected else (float("nan"), 0)
    return {
        "task_loss": loss,
        "bpb": loss / LN2 if byte_level else float("nan"),
        "token_accuracy": correct / n_tok if n_tok else float("nan"),
        "token_error": 1.0 - correct / n_tok if n_tok else float("nan"),
        "answer_accuracy": seq_acc,
        "n_answers": n_seq,
        "n_tokens": n_tok,
        "avg_mem": avg_mem,
        "peak_mem": peak_mem,
        "avg_span": avg_span,
    }


@dataclass
class LoopResult:
    history: list
    state: OptimState
    banks: list


def train_loop(
    model: Model,
    stream,
    cfg: TrainConfig,
    *,
    eval_fn: Optional[Callable[[Model], dict]] = None,
    metric_key: str = "task_loss",
    run_dir=None,
    state: Optional[OptimState] = None,
    banks=None,
    checkpoint_fn: Optional[Callable] = None,
) -> LoopResult:
    """Train block by block; every ``eval_interval`` steps record RunMetrics.

    ``eval_fn`` returns a dict as produced by :func:`evaluate`; ``metric_key``
    selects the task metric column.
    """
    cfg.validate()
    state = state or OptimState()
    banks = banks if banks is not None else model.new_banks(cfg.batch_size)
    rng = np.random.default_rng([cfg.seed, 7, state.step])
    writer = MetricsCSV(Path(run_dir) / "metrics.csv") if run_dir is not None else None
    history = []
    meter = MemoryMeter()
    task_acc, span_acc, secs, n = 0.0, 0.0, [], 0
    while state.step < cfg.total_steps:
        step = state.step
        lr = lr_at_step(step, cfg)
        block = stream.next_block()
        try:
            res = train_step(model, banks, block, cfg, state, lr, rng)
        except NumericHalt as exc:
            if run_dir is not None:
                _dump_diagnostics(Path(run_dir), state.step, exc.diagnostics)
            raise
        if state.step == step:  # skipped update still consumes the block
            state.step += 1
        meter.add(res.stats)
        task_acc += res.task_loss
        span_acc += res.span_loss
        secs.append(res.seconds)
        n += 1
        if state.step % cfg.eval_interval == 0 or state.step == cfg.total_steps:
            ev = eval_fn(model) if eval_fn is not None else {}
            avg_mem, peak_mem, avg_span = meter.result()
            m = RunMetrics(
                step=state.step,
                task_loss=task_acc / n,
                span_loss=span_acc / n,
                bpb=ev.get("bpb", float("nan")),
                metric=ev.get(metric_key, task_acc / n),
                avg_mem=ev.get("avg_mem", avg_mem),
                peak_mem=max(peak_mem, ev.get("peak_mem", 0)),
                ms_per_batch=float(np.median(secs) * 1000.0),
                avg_span=ev.get("avg_span", avg_span),
                lr=lr,
            )
            history.append(m)
            log.info("step %d loss %.4f span %.3g metric %.4f mem %.1f", m.step, m.task_loss, m.span_loss, m.metric, m.avg_mem)
            if writer is not None:
                writer.write(m)
            if checkpoint_fn is not None:
                checkpoint_fn(model, state, banks)
            meter = MemoryMeter()
            task_acc, span_acc, secs, n = 0.0, 0.0, [], 0
    return LoopResult(history, state, banks)


def _dump_diagnostics(run_dir: Path, step: int, diag: dict) -> None:
    out = {"step": step}
    for k, v in diag.items():
        if isinstance(v, list):
            out[k] = [None if a is None else np.asarray(a).tolist() for a in v]
        else:
            out[k] = v
    (run_dir / "nan_dump.json").write_text(json.dumps(out))


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
