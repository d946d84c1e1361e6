"""Command line: ``expirespan {train,eval,analyze,selftest}``.

Exit codes: 0 success, 1 config error, 2 numeric halt, 3 selftest failure.
Relative run directories resolve under ``$EXPIRESPAN_RUN_ROOT`` (default:
the working directory).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint as ckpt
from .expire_span import ConfigError
from .tasks import (
    COPY_VOCAB,
    CollisionConfig,
    CopyConfig,
    SampleStream,
    TokenStream,
    collision_vocab,
    encode,
    gen_collision,
    gen_copy,
    load_char_corpus,
)
from .training import NumericHalt, OptimState, TrainConfig, evaluate, train_loop
from .transformer import Model, ModelConfig

log = logging.getLogger("expirespan")

ENV_RUN_ROOT = "EXPIRESPAN_RUN_ROOT"
TASKS = ("copy", "collision", "collision_easy", "char_lm")
METRIC_KEY = {"copy": "answer_accuracy", "collision": "token_error", "collision_easy": "token_error", "char_lm": "bpb"}
EXIT_OK, EXIT_CONFIG, EXIT_HALT, EXIT_SELFTEST = 0, 1, 2, 3


@dataclass
class CharLMConfig:
    path: str = ""

    def validate(self) -> "CharLMConfig":
        if not self.path:
            raise ConfigError("task_config.path is required for char_lm")
        return self


TASK_CONFIGS = {"copy": CopyConfig, "collision": CollisionConfig, "collision_easy": CollisionConfig, "char_lm": CharLMConfig}
# keys the config file may not set: vocab_size follows from the task, seed lives at top level
_DERIVED = {"model": {"vocab_size"}, "train": {"seed"}, "task_config": {"easy_mode", "seed"}}


@dataclass
class RunConfig:
    task: str = "copy"
    seed: int = 0
    run_dir: str = "runs/default"
    keep_checkpoints: int = 2
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task_config: object = field(default_factory=CopyConfig)

    def to_dict(self) -> dict:
        out = {"task": self.task, "seed": self.seed, "run_dir": self.run_dir, "keep_checkpoints": self.keep_checkpoints}
        for name in ("model", "train", "task_config"):
            d = dataclasses.asdict(getattr(self, name))
            for k in _DERIVED[name]:
                d.pop(k, None)
            out[name] = d
        return out


def _fill(cls, section: str, raw: dict, errors: list) -> object:
    allowed = {f.name for f in dataclasses.fields(cls)} - _DERIVED.get(section, set())
    unknown = sorted(set(raw) - allowed)
    errors.extend(f"{section}.{k}" for k in unknown)
    for k in sorted(allowed - set(raw)):
        default = next(f for f in dataclasses.fields(cls) if f.name == k)
        val = default.default if default.default is not dataclasses.MISSING else default.default_factory()
        log.info("config: %s.%s not given, default %r applied", section, k, val)
    return cls(**{k: v for k, v in raw.items() if k in allowed})


def parse_config(raw: dict) -> RunConfig:
    """Validate a JSON-decoded config; unknown keys are reported all at once."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    top = {"task", "seed", "run_dir", "keep_checkpoints", "model", "train", "task_config"}
    errors = sorted(set(raw) - top)
    task = raw.get("task", "copy")
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
    for k in ("seed", "run_dir", "keep_checkpoints"):
        if k not in raw:
            log.info("config: %s not given, default %r applied", k, getattr(RunConfig, k))
    sections = {}
    for name in ("model", "train", "task_config"):
        sec = raw.get(name, {})
        if not isinstance(sec, dict):
            raise ConfigError(f"{name} must be an object")
        sections[name] = sec
    try:
        model = _fill(ModelConfig, "model", sections["model"], errors)
        train = _fill(TrainConfig, "train", sections["train"], errors)
        tcfg = _fill(TASK_CONFIGS[task], "task_config", sections["task_config"], errors)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    if errors:
        raise ConfigError("unknown config keys: " + ", ".join(errors))
    seed = int(raw.get("seed", 0))
    train.seed = seed
    if isinstance(tcfg, CollisionConfig):
        tcfg.easy_mode = task == "collision_easy"
        tcfg.seed = seed
    cfg = RunConfig(
        task=task,
        seed=seed,
        run_dir=str(raw.get("run_dir", RunConfig.run_dir)),
        keep_checkpoints=int(raw.get("keep_checkpoints", 2)),
        model=model,
        train=train,
        task_config=tcfg,
    )
    if cfg.keep_checkpoints < 1:
        raise ConfigError("keep_checkpoints must be >= 1")
    tcfg.validate()
    train.validate()
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from None
    return parse_config(raw)


def resolve_run_dir(run_dir: str) -> Path:
    p = Path(run_dir)
    if p.is_absolute():
        return p
    return Path(os.environ.get(ENV_RUN_ROOT, ".")) / p


# ---------------------------------------------------------------- tasks


@dataclass
class TaskSetup:
    vocab_size: int
    train_stream: object
    eval_stream_factory: object  # () -> fresh stream
    metric_key: str
    byte_level: bool = False
    vocab: Optional[bytes] = None


def build_task(cfg: RunConfig, batch: Optional[int] = None) -> TaskSetup:
    K = cfg.model.block_size
    B = batch or cfg.train.batch_size
    tc = cfg.task_config
    key = METRIC_KEY[cfg.task]
    if cfg.task == "copy":
        make = lambda r: gen_copy(tc, r)  # noqa: E731
        return TaskSetup(
            COPY_VOCAB, SampleStream(make, B, K, cfg.seed), lambda: SampleStream(make, B, K, 10_000 + cfg.seed), key
        )
    if cfg.task in ("collision", "collision_easy"):
        make = lambda r: gen_collision(tc, r)  # noqa: E731
        return TaskSetup(
            collision_vocab(tc).size,
            SampleStream(make, B, K, cfg.seed),
            lambda: SampleStream(make, B, K, 10_000 + cfg.seed),
            key,
        )
    try:
        corpus = load_char_corpus(tc.path)
    except OSError as exc:
        raise ConfigError(f"cannot read corpus: {exc}") from None
    try:
        train = TokenStream(corpus.train, B, K)
        valid = lambda: TokenStream(corpus.valid, B, K)  # noqa: E731
        valid()
    except ValueError as exc:
        raise ConfigError(f"corpus too small: {exc}") from None
    return TaskSetup(corpus.vocab_size, train, valid, key, byte_level=True, vocab=corpus.vocab)


def _model_config(cfg: RunConfig, vocab_size: int) -> ModelConfig:
    mc = dataclasses.replace(cfg.model, vocab_size=vocab_size)
    return mc.validate()


def _checkpoint_config(cfg: RunConfig, setup: TaskSetup) -> dict:
    out = {"run": cfg.to_dict(), "vocab_size": setup.vocab_size}
    if setup.vocab is not None:
        out["vocab_hex"] = setup.vocab.hex()
    return out


# ---------------------------------------------------------------- commands


def cmd_train(config_path, resume: bool = False) -> int:
    cfg = load_config(config_path)
    run_dir = resolve_run_dir(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    existing = [p.name for p in run_dir.iterdir() if p.name != "config.json"]
    if existing and not resume:
        raise ConfigError(f"run directory {run_dir} is not empty ({', '.join(sorted(existing)[:4])})")
    setup = build_task(cfg)
    model = Model(_model_config(cfg, setup.vocab_size), seed=cfg.seed)
    state = OptimState()
    ck_cfg = _checkpoint_config(cfg, setup)
    if resume:
        last = ckpt.latest(run_dir)
        if last is None:
            raise ConfigError(f"--resume: no checkpoint in {run_dir}")
        data = ckpt.load(last)
        params, m, v = ckpt.split_arrays(data["arrays"])
        model.load_arrays(params)
        state = OptimState(m=m, v=v, step=data["step"], skipped=data["optim"][1])
        # replay the data stream to where training stopped; memories restart empty
        for _ in range(state.step):
            setup.train_stream.next_block()
        log.info("resumed from %s at step %d", last, state.step)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    def eval_fn(m):
        return evaluate(m, setup.eval_stream_factory(), cfg.train.eval_blocks, byte_level=setup.byte_level)

    rot = ckpt.Rotator(run_dir, ck_cfg, keep=cfg.keep_checkpoints)
    result = train_loop(
        model,
        setup.train_stream,
        cfg.train,
        eval_fn=eval_fn,
        metric_key=setup.metric_key,
        run_dir=run_dir,
        state=state,
        checkpoint_fn=rot,
    )
    if result.history:
        last = result.history[-1]
        log.info("done: step %d %s=%.4f avg_mem=%.1f", last.step, setup.metric_key, last.metric, last.avg_mem)
    return EXIT_OK


def load_model(path) -> tuple[Model, RunConfig, dict]:
    data = ckpt.load(path)
    meta = data["config"]
    cfg = parse_config(meta["run"])
    model = Model(_model_config(cfg, int(meta["vocab_size"])), seed=cfg.seed)
    params, _, _ = ckpt.split_arrays(data["arrays"])
    model.load_arrays(params)
    return model, cfg, meta


def cmd_eval(ckpt_path, max_span_override: Optional[int] = None, blocks: Optional[int] = None, out=sys.stdout) -> dict:
    model, cfg, _ = load_model(ckpt_path)
    if max_span_override is not None:
        if model.cfg.mode != "expire_span":
            log.warning("fixed-span checkpoint has no spans; --max-span-override ignored")
        else:
            cap = max_span_override
            if cap > model.cfg.max_span:
                log.warning("override %d exceeds trained max span %d; clamped", cap, model.cfg.max_span)
                cap = model.cfg.max_span
            if cap < 0:
                raise ConfigError("--max-span-override must be >= 0")
            model.span_cap = float(cap)
    setup = build_task(cfg)
    res = evaluate(model, setup.eval_stream_factory(), blocks or cfg.train.eval_blocks, byte_level=setup.byte_level)
    res = {k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in res.items()}
    res["metric_key"] = setup.metric_key
    res["max_span_override"] = model.span_cap
    if out is not None:
        out.write(json.dumps(res, sort_keys=True) + "\n")
    return res


def read_analysis_input(path, meta: dict) -> np.ndarray:
    if "vocab_hex" in meta:
        with open(path, "rb") as fh:
            raw = fh.read()
        try:
            return encode(raw, bytes.fromhex(meta["vocab_hex"]))
        except ValueError as exc:
            raise ConfigError(f"input has bytes the model never saw: {exc}") from None
    with open(path) as fh:
        text = fh.read()
    try:
        ids = np.array([int(t) for t in text.split()], dtype=np.int64)
    except ValueError:
        raise ConfigError("input must be whitespace-separated token ids") from None
    V = int(meta["vocab_size"])
    if ids.size == 0 or ids.min() < 0 or ids.max() >= V:
        raise ConfigError(f"input must be a non-empty list of ids in [0, {V})")
    return ids


def span_trace(model: Model, ids: np.ndarray) -> list[tuple]:
    """(layer, position, token, e_i) for every position, spans as predicted at creation."""
    K = model.cfg.block_size
    banks = model.new_banks(1)
    rows = []
    for s in range(0, ids.size, K):
        tok = ids[s : s + K]
        out = model.step(banks, tok[None, :])
        for li, e in enumerate(out.spans):
            new = e[0, -tok.size :]
            rows.extend((li, s + j, int(tok[j]), float(new[j])) for j in range(tok.size))
    rows.sort(key=lambda r: (r[0], r[1]))
    return rows


def cmd_analyze(ckpt_path, input_path, out_path=None) -> int:
    model, _, meta = load_model(ckpt_path)
    if model.cfg.mode != "expire_span":
        raise ConfigError("no spans to analyze (fixed-span checkpoint)")
    ids = read_analysis_input(input_path, meta)
    rows = span_trace(model, ids)
    fh = open(out_path, "w", newline="") if out_path else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(["layer", "position", "token", "e_i"])
        for li, pos, tok, e in rows:
            w.writerow([li, pos, tok, repr(e)])
    finally:
        if out_path:
            fh.close()
    return EXIT_OK


def cmd_selftest() -> int:
    from .selftest import run_all

    results = run_all(out=print)
    return EXIT_OK if all(r.passed for r in results) else EXIT_SELFTEST


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="expirespan", description="Expire-Span transformer experiments")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="cmd", required=True)
    t = sub.add_parser("train", help="train from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", action="store_true", help="continue from the newest checkpoint in the run directory")
    e = sub.add_parser("eval", help="evaluate a checkpoint, print metrics JSON")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--max-span-override", type=int, default=None)
    e.add_argument("--blocks", type=int, default=None, help="evaluation blocks (default: train.eval_blocks)")
    a = sub.add_parser("analyze", help="per-token, per-layer span trace as CSV")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--input", required=True)
    a.add_argument("--out", default=None, help="CSV path (default: stdout)")
    sub.add_parser("selftest", help="run the invariant suite")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.cmd == "train":
            return cmd_train(args.config, resume=args.resume)
        if args.cmd == "eval":
            cmd_eval(args.ckpt, args.max_span_override, args.blocks)
            return EXIT_OK
        if args.cmd == "analyze":
            return cmd_analyze(args.ckpt, args.input, args.out)
        return cmd_selftest()
    except (ConfigError, ckpt.CheckpointError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except NumericHalt as exc:
        log.error("numeric halt: %s", exc)
        return EXIT_HALT


if __name__ == "__main__":
    sys.exit(main())
