"""Invariant suite run by ``expirespan selftest``.

Every check returns a :class:`CheckResult` with the measured quantity and the
tolerance it was held to, so the report doubles as a record.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .expire_span import (
    memory_size_closed_form,
    memory_size_oracle,
    ramp_mask,
    renormalize_attention,
    soft_mask,
)
from .numerics import Tape, Tensor
from .transformer import Model, ModelConfig


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    tolerance: float
    seconds: float = 0.0
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"[{tag}] {self.name:<22} measured={self.measured:.4g} tol={self.tolerance:.4g} ({self.seconds:.1f}s){extra}"


# ---------------------------------------------------------------- 1. masks

RENORM_EXAMPLES = [
    ([1 / 3, 1 / 3, 1 / 3], [1.0, 1.0, 1.0], [1 / 3, 1 / 3, 1 / 3]),
    ([1 / 3, 1 / 3, 1 / 3], [1.0, 1.0, 0.0], [0.5, 0.5, 0.0]),
    ([0.5, 0.3, 0.2], [1.0, 0.5, 0.0], [0.5 / 0.65, 0.15 / 0.65, 0.0]),
]


def check_mask_algebra(R: float = 128.0) -> CheckResult:
    got = soft_mask(np.array([0.0, -R / 2, -R, R]), R)
    exact = bool(np.array_equal(got, np.array([1.0, 0.5, 0.0, 1.0])))
    worst = 0.0
    for a, m, want in RENORM_EXAMPLES:
        out = renormalize_attention(np.array([a]), np.array([m])).data[0]
        worst = max(worst, float(np.abs(out - np.array(want)).max()))
    detail = "" if exact else f"soft_mask gave {got.tolist()}"
    return CheckResult("mask_algebra", exact and worst <= 1e-12, worst, 1e-12, detail=detail)


def check_ramp_gradient(R: float = 4.0, seed: int = 0) -> CheckResult:
    """d mask / d span against central differences, away from the kinks."""
    rng = np.random.default_rng(seed)
    ages = np.arange(12, dtype=float)[:, None] * np.ones((1, 6))
    spans = rng.uniform(1.0, 9.0, size=(1, 6))
    weights = rng.standard_normal((1, 12, 6))

    def f(e):
        return nx.sum_(nx.mul(ramp_mask(e, ages, R), weights))

    r = 1.0 + (spans[:, None, :] - ages[None]) / R
    near = (np.abs(r) < 1e-4) | (np.abs(r - 1.0) < 1e-4)
    if near.any():
        spans = spans + 0.013
    err = nx.grad_check(f, spans, eps=1e-6)
    return CheckResult("ramp_gradient", err <= 1e-6, err, 1e-6)


# ---------------------------------------------------------------- 2. gradients


def tiny_model(seed: int = 0) -> Model:
    cfg = ModelConfig(vocab_size=11, n_layers=2, d_model=8, n_heads=2, d_ff=16, block_size=8, max_span=16, ramp=4)
    model = Model(cfg, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for name, p in model.parameters().items():
        # move everything off its symmetric init so no gradient is trivially zero
        if name.endswith("span.w") or name.endswith("pos_bias") or name.endswith(".b") or name.endswith(".g"):
            p.data = p.data + 0.3 * rng.standard_normal(p.shape)
    return model


def _snapshots(model: Model, blocks: list) -> list:
    """Bank state entering each block, from an unperturbed pass without pruning."""
    model.pruning = False
    banks = model.new_banks(1)
    snaps = []
    for tok in blocks:
        snaps.append([b.snapshot() for b in banks])
        model.step(banks, tok)
    return snaps


def _blocks_loss(model: Model, blocks, targets, snaps, alpha: float) -> tuple[Tensor, int]:
    total = Tensor(np.asarray(0.0))
    n_ramp = 0
    for tok, tgt, snap in zip(blocks, targets, snaps):
        banks = [b.snapshot() for b in snap]
        out = model.forward_block(banks, tok, alpha=alpha)
        ce = nx.cross_entropy(out.logits, tgt.reshape(-1))
        total = nx.add(total, nx.add(ce, out.aux_loss))
        for m in out.masks:
            n_ramp += int(((m > 0.0) & (m < 1.0)).any(axis=1).sum())
    return total, n_ramp


def check_end_to_end_gradients(seed: int = 0, alpha: float = 1e-3, tol: float = 1e-4, eps: float = 1e-6) -> CheckResult:
    """Every parameter of a two-layer model against central differences.

    The loss is the sum of per-block total losses over 32 tokens; cached
    state entering each block is held at its unperturbed value, which is the
    function the tape differentiates (memories are detached at block edges).
    """
    model = tiny_model(seed)
    rng = np.random.default_rng(seed)
    toks = rng.integers(0, model.cfg.vocab_size, size=33)
    K = model.cfg.block_size
    blocks = [toks[s : s + K][None, :] for s in range(0, 32, K)]
    targets = [toks[s + 1 : s + 1 + K][None, :] for s in range(0, 32, K)]
    snaps = _snapshots(model, blocks)
    params = model.parameters()
    model.zero_grad()
    with Tape():
        loss, n_ramp = _blocks_loss(model, blocks, targets, snaps, alpha)
        loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}

    def value() -> float:
        v, _ = _blocks_loss(model, blocks, targets, snaps, alpha)
        return float(v.data)

    worst, where = 0.0, ""
    for name, p in params.items():
        flat = p.data.reshape(-1)
        ga = analytic[name].reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + eps
            up = value()
            flat[j] = old - eps
            down = value()
            flat[j] = old
            num = (up - down) / (2 * eps)
            err = abs(ga[j] - num) / max(1.0, abs(num))
            if err > worst:
                worst, where = err, f"{name}[{j}]"
    ok = worst <= tol and n_ramp >= 1
    detail = f"worst at {where}; in-ramp memories={n_ramp}"
    return CheckResult("end_to_end_gradient", ok, worst, tol, detail=detail)


# ---------------------------------------------------------------- 3. memory size


def check_memory_size_identity(n_sets: int = 20, L: float = 100.0, R: float = 16.0, T: int = 5000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    slack = (L + R) / T * 2 + 1
    worst = 0.0
    for _ in range(n_sets):
        spans = rng.uniform(0.0, L, size=T)
        gap = abs(memory_size_oracle(spans, R, T) - memory_size_closed_form(spans, R, T))
        worst = max(worst, gap)
    return CheckResult("memory_size_identity", worst <= slack, worst, slack)


# ---------------------------------------------------------------- 4. pruning


def random_config(rng: np.random.Generator) -> tuple[ModelConfig, int, int]:
    H = int(rng.choice([1, 2, 4]))
    d = H * int(rng.choice([2, 4]))
    K = int(rng.integers(2, 9))
    L = int(rng.integers(K, 40))
    R = int(rng.integers(1, L + 1))
    cfg = ModelConfig(
        vocab_size=int(rng.integers(3, 12)),
        n_layers=int(rng.integers(1, 3)),
        d_model=d,
        n_heads=H,
        d_ff=int(rng.choice([4, 8, 16])),
        block_size=K,
        max_span=L,
        ramp=R,
        scaled_variant=bool(rng.random() < 0.3),
    )
    return cfg, int(rng.integers(1, 4)), int(rng.integers(6, 16))


def _skew_spans(model: Model, rng: np.random.Generator) -> None:
    # spread spans over (0, L) so some entries expire early and some late
    for layer in model.layers:
        layer.span.w.data = 2.0 * rng.standard_normal(layer.span.w.shape)
        layer.span.b.data = np.array([rng.uniform(-3.0, 1.0)])


def check_pruning_soundness(n_configs: int = 10, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    mismatched, pruned_total = 0, 0
    for c in range(n_configs):
        cfg, B, n_blocks = random_config(rng)
        model = Model(cfg, seed=c)
        _skew_spans(model, rng)
        toks = rng.integers(0, cfg.vocab_size, size=(n_blocks, B, cfg.block_size))
        outs = []
        for pruning in (True, False):
            model.pruning = pruning
            banks = model.new_banks(B)
            logits = [model.step(banks, t).logits.data for t in toks]
            outs.append(np.stack(logits))
            if pruning:
                pruned_total += sum(b.n_deleted for b in banks)
        if not np.array_equal(outs[0], outs[1]):
            mismatched += 1
    ok = mismatched == 0 and pruned_total > 0
    return CheckResult(
        "pruning_soundness", ok, float(mismatched), 0.0, detail=f"configs={n_configs} entries pruned={pruned_total}"
    )


# ---------------------------------------------------------------- 5. baselines


def reference_logits(model: Model, tokens: np.ndarray) -> np.ndarray:
    """Plain quadratic causal attention over one sequence, straight numpy."""
    c = model.cfg
    tokens = np.asarray(tokens)
    T = tokens.size
    H, dh = c.n_heads, c.d_head
    gc = math.sqrt(2.0 / math.pi)

    def ln(x, g, b):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * g + b

    x = model.embed.data[tokens]
    pos = np.arange(T)
    dist = np.clip(pos[:, None] - pos[None, :], 0, c.max_distance)
    causal = pos[:, None] >= pos[None, :]
    for layer in model.layers:
        p = {k: v.data for k, v in layer.p.items()}
        h = ln(x, p["ln1.g"], p["ln1.b"])
        q = (h @ p["wq"]).reshape(T, H, dh)
        k = (h @ p["wk"]).reshape(T, H, dh)
        v = (h @ p["wv"]).reshape(T, H, dh)
        o = np.empty((T, H, dh))
        for hh in range(H):
            s = q[:, hh] @ k[:, hh].T / math.sqrt(dh) + p["pos_bias"][hh][dist]
            s = np.where(causal, s, -np.inf)
            w = np.exp(s - s.max(1, keepdims=True))
            w /= w.sum(1, keepdims=True)
            o[:, hh] = w @ v[:, hh]
        x = x + o.reshape(T, c.d_model) @ p["wo"]
        h2 = ln(x, p["ln2.g"], p["ln2.b"])
        u = h2 @ p["ff1.w"] + p["ff1.b"]
        u = 0.5 * u * (1.0 + np.tanh(gc * (u + 0.044715 * u**3)))
        x = x + u @ p["ff2.w"] + p["ff2.b"]
    x = ln(x, model.ln_f["g"].data, model.ln_f["b"].data)
    return x @ model.out_w.data + model.out_b.data


def check_baseline_equivalence(n_trials: int = 5, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    unequal = 0
    worst_oracle = 0.0
    for trial in range(n_trials):
        cfg, B, n_blocks = random_config(rng)
        model = Model(cfg, seed=trial)
        _skew_spans(model, rng)
        toks = rng.integers(0, cfg.vocab_size, size=(n_blocks, B, cfg.block_size))

        model.force_unit_mask = True
        banks = model.new_banks(B)
        forced = np.stack([model.step(banks, t).logits.data for t in toks])

        fixed_cfg = ModelConfig(**{**cfg.to_dict(), "mode": "fixed_span", "fixed_span_length": cfg.max_distance})
        fixed = Model(fixed_cfg, seed=trial)
        fixed.load_arrays({k: v for k, v in model.state_arrays().items() if ".span." not in k})
        banks = fixed.new_banks(B)
        base = np.stack([fixed.step(banks, t).logits.data for t in toks])
        if not np.array_equal(forced, base):
            unequal += 1

        # unbounded fixed span over one block against the quadratic oracle
        unb = Model(ModelConfig(**{**fixed_cfg.to_dict(), "fixed_span_length": None}), seed=trial)
        unb.load_arrays(fixed.state_arrays())
        seq = rng.integers(0, cfg.vocab_size, size=cfg.block_size)
        got = unb.step(unb.new_banks(1), seq[None, :]).logits.data
        want = reference_logits(unb, seq)
        worst_oracle = max(worst_oracle, float(np.abs(got - want).max()))
    ok = unequal == 0 and worst_oracle <= 1e-10
    return CheckResult(
        "baseline_equivalence", ok, worst_oracle, 1e-10, detail=f"forced-mask vs fixed mismatches={unequal}"
    )


# ---------------------------------------------------------------- driver

CHECKS: list[tuple[str, Callable[[], CheckResult]]] = [
    ("mask_algebra", check_mask_algebra),
    ("ramp_gradient", check_ramp_gradient),
    ("end_to_end_gradient", check_end_to_end_gradients),
    ("memory_size_identity", check_memory_size_identity),
    ("pruning_soundness", check_pruning_soundness),
    ("baseline_equivalence", check_baseline_equivalence),
]


def run_all(out=print) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            res = fn()
        except Exception as exc:  # a crashing check is a failing check
            res = CheckResult(name, False, float("nan"), float("nan"), detail=f"{type(exc).__name__}: {exc}")
        res.seconds = time.perf_counter() - t0
        out(res.line())
        results.append(res)
    failed = [r.name for r in results if not r.passed]
    out("selftest: all checks passed" if not failed else f"selftest: FAILED {', '.join(failed)}")
    return results
