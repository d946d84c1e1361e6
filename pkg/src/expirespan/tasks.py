"""Synthetic task generators and the block streams that feed the model.

All randomness comes from ``numpy.random.Generator`` (PCG64), so a sample is
a pure function of its config and seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator, Optional

import numpy as np

from .expire_span import ConfigError


@dataclass
class TaskSample:
    input_tokens: np.ndarray
    target_tokens: np.ndarray
    loss_mask: np.ndarray

    def __post_init__(self):
        self.input_tokens = np.asarray(self.input_tokens, dtype=np.int64)
        self.target_tokens = np.asarray(self.target_tokens, dtype=np.int64)
        self.loss_mask = np.asarray(self.loss_mask, dtype=bool)
        n = len(self.input_tokens)
        if len(self.target_tokens) != n or len(self.loss_mask) != n:
            raise ValueError("input, target and mask lengths differ")
        if not self.loss_mask.any():
            raise ValueError("a sample must score at least one position")

    def __len__(self) -> int:
        return len(self.input_tokens)


# ---------------------------------------------------------------- copy task

COPY_A, COPY_B, COPY_GO, COPY_SLOT, COPY_END = range(5)
COPY_VOCAB = 5
COPY_NAMES = ("A", "B", "GO", "_", "END")


@dataclass
class CopyConfig:
    """n ~ U{min_count..max_count} copies of A are followed by B's, a GO
    marker and n+1 answer slots.  With ``aligned`` the A field is
    ``max_count`` wide (padded with B) so each answer slot sits a constant
    distance after the A it copies; exactly ``distance`` B's separate that
    field from GO.  Without it the n A's are followed directly by
    ``distance`` B's."""

    distance: int = 256
    min_count: int = 1
    max_count: int = 8
    aligned: bool = True

    def validate(self) -> "CopyConfig":
        if self.distance < 1:
            raise ConfigError("copy distance must be >= 1")
        if not (1 <= self.min_count <= self.max_count):
            raise ConfigError("need 1 <= min_count <= max_count")
        return self

    @property
    def lag(self) -> int:
        """Distance from answer slot j back to field position j."""
        return self.max_count + self.distance + 1


def copy_sample(n: int, cfg: CopyConfig) -> TaskSample:
    pad = cfg.max_count - n if cfg.aligned else 0
    prefix = [COPY_A] * n + [COPY_B] * (pad + cfg.distance)
    slots = [COPY_SLOT] * (n + 1)
    inputs = prefix + [COPY_GO] + slots
    targets = [COPY_B] * (len(prefix) + 1) + [COPY_A] * n + [COPY_END]
    mask = [False] * (len(prefix) + 1) + [True] * (n + 1)
    return TaskSample(inputs, targets, mask)


def gen_copy(cfg: CopyConfig, rng: np.random.Generator) -> TaskSample:
    n = int(rng.integers(cfg.min_count, cfg.max_count + 1))
    return copy_sample(n, cfg)


def copy_count(sample: TaskSample) -> int:
    return int((sample.input_tokens == COPY_A).sum())


# ---------------------------------------------------------------- collisions


@dataclass
class CollisionConfig:
    grid_size: int = 16
    n_particles: int = 2
    n_colors: int = 5
    color_change_prob: float = 0.05
    matched_query_rate: float = 0.4
    episode_steps: int = 512
    question_interval: int = 64
    easy_mode: bool = False
    map_question_rate: float = 0.5  # easy mode: share of "last 3 collisions" questions
    max_velocity_retries: int = 100
    seed: int = 0

    def validate(self) -> "CollisionConfig":
        if self.grid_size < 2:
            raise ConfigError("grid_size must be >= 2")
        if self.n_particles != 2:
            raise ConfigError("collision tokens are defined for exactly two particles")
        for name in ("color_change_prob", "matched_query_rate", "map_question_rate"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name} must be in [0, 1]")
        if self.question_interval < 1 or self.episode_steps < 1:
            raise ConfigError("episode_steps and question_interval must be >= 1")
        return self

    @property
    def tokens_per_step(self) -> int:
        return 6 if self.easy_mode else 8


@dataclass
class Collision:
    step: int
    cell: tuple
    quadrant: int
    colors: tuple  # sorted color pair; (0, 0) in easy mode


@dataclass
class Episode:
    positions: np.ndarray  # (steps, 2, 2) continuous (x, y)
    colors: np.ndarray  # (steps, 2)
    collisions: list = field(default_factory=list)


def rasterize(pos) -> tuple:
    return tuple(int(v) for v in np.floor(pos))


def quadrant(cell: tuple, grid_size: int) -> int:
    """0..3 = 2 * (y in upper half) + (x in right half); halves split at G/2."""
    half = grid_size // 2
    x, y = cell
    return 2 * int(y >= half) + int(x >= half)


def simulate_collision(
    cfg: CollisionConfig,
    rng: np.random.Generator,
    init_positions: Optional[np.ndarray] = None,
    init_velocities: Optional[np.ndarray] = None,
) -> Episode:
    G = float(cfg.grid_size)
    n = cfg.episode_steps
    pos = rng.uniform(0.0, G, size=(2, 2)) if init_positions is None else np.array(init_positions, float)
    vel = rng.standard_normal((2, 2)) if init_velocities is None else np.array(init_velocities, float)
    col = np.zeros(2, dtype=np.int64) if cfg.easy_mode else rng.integers(0, cfg.n_colors, size=2)
    positions = np.empty((n, 2, 2))
    colors = np.empty((n, 2), dtype=np.int64)
    collisions = []
    for s in range(n):
        if s > 0:
            for p in range(2):
                nxt = pos[p] + vel[p]
                tries = 0
                while not np.all((nxt >= 0.0) & (nxt < G)) and tries < cfg.max_velocity_retries:
                    vel[p] = rng.standard_normal(2)
                    nxt = pos[p] + vel[p]
                    tries += 1
                pos[p] = np.clip(nxt, 0.0, np.nextafter(G, 0.0))
            if not cfg.easy_mode:
                for p in range(2):
                    if rng.random() < cfg.color_change_prob:
                        col[p] = (col[p] + rng.integers(1, cfg.n_colors)) % cfg.n_colors
        positions[s] = pos
        colors[s] = col
        c0, c1 = rasterize(pos[0]), rasterize(pos[1])
        if c0 == c1:
            pair = tuple(sorted(int(c) for c in col))
            collisions.append(Collision(s, c0, quadrant(c0, cfg.grid_size), pair))
    return Episode(positions, colors, collisions)


def collision_rate(cfg: CollisionConfig, rng: np.random.Generator) -> float:
    ep = simulate_collision(cfg, rng)
    return len(ep.collisions) / cfg.episode_steps


@dataclass
class CollisionVocab:
    """Token layout: coordinates, colors, question markers, answers."""

    grid_size: int
    n_colors: int

    @property
    def color0(self) -> int:
        return self.grid_size

    @property
    def no_question(self) -> int:
        return self.grid_size + self.n_colors

    @property
    def ask(self) -> int:
        return self.no_question + 1

    @property
    def q_last(self) -> int:
        return self.no_question + 2

    @property
    def q_map(self) -> int:
        return self.no_question + 3

    @property
    def qcolor0(self) -> int:
        return self.no_question + 4

    @property
    def quadrant0(self) -> int:
        return self.qcolor0 + self.n_colors

    @property
    def map0(self) -> int:
        return self.quadrant0 + 4

    @property
    def size(self) -> int:
        return self.map0 + 64

    def map_token(self, quads) -> int:
        a, b, c = quads
        return self.map0 + 16 * a + 4 * b + c

    def decode_map(self, token: int) -> tuple:
        k = token - self.map0
        return (k // 16, (k // 4) % 4, k % 4)


def collision_vocab(cfg: CollisionConfig) -> CollisionVocab:
    return CollisionVocab(cfg.grid_size, cfg.n_colors)


def _color_pairs(n_colors: int) -> list:
    return [(a, b) for a in range(n_colors) for b in range(a, n_colors)]


def tokenize_collision(ep: Episode, cfg: CollisionConfig, rng: np.random.Generator) -> TaskSample:
    """Eight tokens per step (x1 y1 x2 y2 c1 c2 q1 q2), six in easy mode
    (x1 y1 x2 y2 qtype ask).  Answers are scored on the last token of a
    question step."""
    V = collision_vocab(cfg)
    G = cfg.grid_size
    tps = cfg.tokens_per_step
    n = len(ep.positions)
    inputs = np.empty(n * tps, dtype=np.int64)
    targets = np.zeros(n * tps, dtype=np.int64)
    mask = np.zeros(n * tps, dtype=bool)
    by_step: dict[int, Collision] = {c.step: c for c in ep.collisions}
    history: list[Collision] = []
    last_by_pair: dict[tuple, Collision] = {}
    pairs = _color_pairs(cfg.n_colors)
    for s in range(n):
        if s in by_step:
            history.append(by_step[s])
            last_by_pair[by_step[s].colors] = by_step[s]
        base = s * tps
        cells = [rasterize(ep.positions[s, p]) for p in range(2)]
        inputs[base : base + 4] = [min(cells[0][0], G - 1), min(cells[0][1], G - 1),
                                   min(cells[1][0], G - 1), min(cells[1][1], G - 1)]
        asking = s > 0 and s % cfg.question_interval == 0 and history
        if cfg.easy_mode:
            qtype, answer = V.no_question, None
            if asking:
                if len(history) >= 3 and rng.random() < cfg.map_question_rate:
                    qtype = V.q_map
                    answer = V.map_token([c.quadrant for c in history[-3:]])
                else:
                    qtype = V.q_last
                    answer = V.quadrant0 + history[-1].quadrant
            inputs[base + 4] = qtype
            inputs[base + 5] = V.ask if answer is not None else V.no_question
            if answer is not None:
                targets[base + 5] = answer
                mask[base + 5] = True
            continue
        inputs[base + 4 : base + 6] = V.color0 + ep.colors[s]
        q = (V.no_question, V.no_question)
        if asking:
            if rng.random() < cfg.matched_query_rate:
                pair = history[-1].colors
            else:
                pair = None
                for _ in range(100):
                    cand = pairs[int(rng.integers(len(pairs)))]
                    if cand in last_by_pair:
                        pair = cand
                        break
                if pair is None:
                    pair = history[-1].colors
            q = (V.qcolor0 + pair[0], V.qcolor0 + pair[1])
            targets[base + 7] = V.quadrant0 + last_by_pair[pair].quadrant
            mask[base + 7] = True
        inputs[base + 6 : base + 8] = q
    if not mask.any():
        # no question could be asked; score nothing useful but keep the invariant
        raise ValueError("episode produced no answerable question")
    return TaskSample(inputs, targets, mask)


def gen_collision(cfg: CollisionConfig, rng: np.random.Generator) -> TaskSample:
    for _ in range(100):
        ep = simulate_collision(cfg, rng)
        try:
            return tokenize_collision(ep, cfg, rng)
        except ValueError:
            continue
    raise RuntimeError("could not generate an episode with an answerable question")


def dump_episode(ep: Episode, path) -> None:
    """One JSON record per timestep."""
    coll = {c.step: c for c in ep.collisions}
    with open(path, "w") as fh:
        for s in range(len(ep.positions)):
            rec = {
                "step": s,
                "positions": ep.positions[s].tolist(),
                "colors": ep.colors[s].tolist(),
                "collision": None if s not in coll else {"cell": list(coll[s].cell), "quadrant": coll[s].quadrant},
            }
            fh.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------- char LM


@dataclass
class CharCorpus:
    vocab: bytes
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)


def build_vocab(data: bytes) -> bytes:
    if not data:
        raise ValueError("empty corpus")
    return bytes(sorted(set(data)))


def encode(data: bytes, vocab: bytes) -> np.ndarray:
    table = np.full(256, -1, dtype=np.int64)
    table[np.frombuffer(vocab, dtype=np.uint8)] = np.arange(len(vocab))
    ids = table[np.frombuffer(data, dtype=np.uint8)]
    if (ids < 0).any():
        raise ValueError("byte outside vocabulary")
    return ids


def load_char_corpus(path) -> CharCorpus:
    """Contiguous 90/5/5 split of a byte file."""
    with open(path, "rb") as fh:
        data = fh.read()
    vocab = build_vocab(data)
    ids = encode(data, vocab)
    n = len(ids)
    a, b = int(n * 0.9), int(n * 0.95)
    return CharCorpus(vocab, ids[:a], ids[a:b], ids[b:])


def char_lm_stream(ids: np.ndarray, K: int) -> Iterator[TaskSample]:
    """Non-overlapping blocks; target is the next symbol, unscored past the end."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("empty corpus")
    for s in range(0, ids.size, K):
        x = ids[s : s + K]
        y = np.zeros_like(x)
        m = np.zeros(x.size, dtype=bool)
        nxt = ids[s + 1 : s + 1 + K]
        y[: nxt.size] = nxt
        m[: nxt.size] = True
        if not m.any():
            return
        yield TaskSample(x, y, m)


# ---------------------------------------------------------------- streams


@dataclass
class Block:
    inputs: np.ndarray  # (B, K)
    targets: np.ndarray
    mask: np.ndarray
    sample_ids: np.ndarray  # (B, K), -1 where no sample


class SampleStream:
    """B lockstep streams of back-to-back samples, cut into K-token blocks."""

    def __init__(self, make: Callable[[np.random.Generator], TaskSample], batch: int, K: int, seed: int):
        self.make = make
        self.batch = batch
        self.K = K
        self.rngs = [np.random.default_rng([seed, r]) for r in range(batch)]
        self.buf = [[np.zeros(0, np.int64)] * 4 for _ in range(batch)]
        self.next_id = 0
        self.answer_counts: dict[int, int] = {}

    def _fill(self, r: int) -> None:
        x, y, m, ids = self.buf[r]
        while len(x) < self.K:
            s = self.make(self.rngs[r])
            sid = self.next_id
            self.next_id += 1
            self.answer_counts[sid] = int(s.loss_mask.sum())
            x = np.concatenate([x, s.input_tokens])
            y = np.concatenate([y, s.target_tokens])
            m = np.concatenate([m.astype(bool), s.loss_mask])
            ids = np.concatenate([ids, np.full(len(s), sid)])
        self.buf[r] = [x, y, m, ids]

    def next_block(self) -> Block:
        K = self.K
        out = [np.empty((self.batch, K), np.int64) for _ in range(4)]
        for r in range(self.batch):
            self._fill(r)
            for j in range(4):
                out[j][r] = self.buf[r][j][:K]
                self.buf[r][j] = self.buf[r][j][K:]
        return Block(out[0], out[1], out[2].astype(bool), out[3])


class TokenStream:
    """B contiguous shards of one id sequence (language modelling)."""

    def __init__(self, ids: np.ndarray, batch: int, K: int):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size < batch * (K + 1):
            raise ValueError("corpus too small for this batch and block size")
        self.shard = ids.size // batch
        self.ids = ids[: self.shard * batch].reshape(batch, self.shard)
        self.batch, self.K = batch, K
        self.pos = 0

    def blocks_per_epoch(self) -> int:
        return (self.shard - 1) // self.K

    def next_block(self) -> Block:
        if self.pos + self.K + 1 > self.shard:
            self.pos = 0
        s = self.pos
        x = self.ids[:, s : s + self.K]
        y = self.ids[:, s + 1 : s + 1 + self.K]
        self.pos += self.K
        m = np.ones_like(x, dtype=bool)
        return Block(x.copy(), y.copy(), m, np.full_like(x, -1))
