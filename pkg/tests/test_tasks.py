import json

import numpy as np
import pytest

from expirespan.expire_span import ConfigError
from expirespan.tasks import (
    COPY_A,
    COPY_B,
    COPY_END,
    COPY_GO,
    COPY_SLOT,
    CollisionConfig,
    CopyConfig,
    SampleStream,
    TaskSample,
    TokenStream,
    build_vocab,
    char_lm_stream,
    collision_rate,
    collision_vocab,
    copy_count,
    copy_sample,
    dump_episode,
    encode,
    gen_collision,
    gen_copy,
    load_char_corpus,
    quadrant,
    rasterize,
    simulate_collision,
    tokenize_collision,
)

A, B, GO, S, END = COPY_A, COPY_B, COPY_GO, COPY_SLOT, COPY_END


def test_task_sample_invariants():
    with pytest.raises(ValueError):
        TaskSample([1, 2], [1], [True, True])
    with pytest.raises(ValueError):
        TaskSample([1, 2], [1, 2], [False, False])


# ---------------------------------------------------------------- copy


def test_copy_literal_layout():
    s = copy_sample(3, CopyConfig(distance=5, max_count=3, aligned=False))
    assert s.input_tokens.tolist() == [A, A, A, B, B, B, B, B, GO, S, S, S, S]
    assert s.target_tokens[s.loss_mask].tolist() == [A, A, A, END]
    assert s.loss_mask.sum() == 4 and s.loss_mask[-4:].all()


def test_copy_aligned_layout():
    cfg = CopyConfig(distance=5, max_count=4)
    s = copy_sample(2, cfg)
    assert s.input_tokens.tolist() == [A, A] + [B] * 7 + [GO, S, S, S]
    slots = np.flatnonzero(s.loss_mask)
    # slot j sits cfg.lag after field position j
    assert (slots[:2] - np.arange(2)).tolist() == [cfg.lag, cfg.lag]
    # distractor run between the field and GO is exactly `distance` long
    assert list(s.input_tokens[cfg.max_count : cfg.max_count + cfg.distance]) == [B] * 5


def test_copy_max_count_answer_length():
    cfg = CopyConfig(distance=10, min_count=1, max_count=6)
    assert copy_sample(6, cfg).loss_mask.sum() == 7


def test_copy_counts_uniform_and_pure():
    cfg = CopyConfig(distance=4, min_count=2, max_count=5)
    a = [copy_count(gen_copy(cfg, np.random.default_rng(i))) for i in range(400)]
    b = [copy_count(gen_copy(cfg, np.random.default_rng(i))) for i in range(400)]
    assert a == b
    assert set(a) == {2, 3, 4, 5}


def test_copy_answer_only_in_prefix():
    cfg = CopyConfig(distance=8, max_count=5)
    s3, s4 = copy_sample(3, cfg), copy_sample(4, cfg)
    # distractors identical, prefix count differs, answers differ
    assert s3.input_tokens[cfg.max_count :].tolist()[: cfg.distance] == s4.input_tokens[cfg.max_count :].tolist()[: cfg.distance]
    assert s3.target_tokens[s3.loss_mask].tolist() != s4.target_tokens[s4.loss_mask].tolist()


def test_copy_config_validation():
    with pytest.raises(ConfigError):
        CopyConfig(distance=0).validate()
    with pytest.raises(ConfigError):
        CopyConfig(min_count=3, max_count=2).validate()


# ---------------------------------------------------------------- collision


def test_rasterize_floor():
    assert rasterize((3.2, 3.9)) == (3, 3)
    assert rasterize((3.7, 3.1)) == (3, 3)


def test_quadrants_partition_grid():
    G = 16
    quads = np.array([[quadrant((x, y), G) for x in range(G)] for y in range(G)])
    assert quads[:8, :8].max() == 0 and quads[:8, 8:].min() == 1
    assert set(quads[8:, :8].ravel()) == {2} and set(quads[8:, 8:].ravel()) == {3}
    assert quadrant((7, 7), G) == 0 and quadrant((8, 7), G) == 1


def test_zero_velocity_no_motion():
    cfg = CollisionConfig(episode_steps=20, easy_mode=True)
    ep = simulate_collision(cfg, np.random.default_rng(0), np.array([[3.2, 3.9], [3.7, 3.1]]), np.zeros((2, 2)))
    assert np.all(ep.positions == ep.positions[0])
    assert [c.step for c in ep.collisions] == list(range(20))
    assert ep.collisions[0].cell == (3, 3) and ep.collisions[0].quadrant == 0


def test_zero_velocity_apart_never_collides():
    cfg = CollisionConfig(episode_steps=20, easy_mode=True)
    ep = simulate_collision(cfg, np.random.default_rng(0), np.array([[1.5, 1.5], [9.5, 9.5]]), np.zeros((2, 2)))
    assert ep.collisions == []


def test_positions_stay_on_grid():
    cfg = CollisionConfig(grid_size=6, episode_steps=500)
    ep = simulate_collision(cfg, np.random.default_rng(1))
    assert ep.positions.min() >= 0 and ep.positions.max() < 6


def test_colors_change_only_in_hard_mode():
    easy = simulate_collision(CollisionConfig(episode_steps=300, easy_mode=True), np.random.default_rng(2))
    hard = simulate_collision(CollisionConfig(episode_steps=300, color_change_prob=0.2), np.random.default_rng(2))
    assert np.all(easy.colors == 0)
    assert len(np.unique(hard.colors)) > 1


def test_collision_rate_pinned():
    # Monte-Carlo pin on the default 16x16 grid (recorded once from this generator)
    cfg = CollisionConfig(episode_steps=200_000, easy_mode=True)
    rate = collision_rate(cfg, np.random.default_rng(0))
    assert rate == PINNED_RATE_16


# measured: collision_rate(CollisionConfig(episode_steps=200_000, easy_mode=True), default_rng(0))
PINNED_RATE_16 = 0.003575


def _hard_episode():
    cfg = CollisionConfig(grid_size=4, episode_steps=200, question_interval=5, color_change_prob=0.1)
    return cfg, simulate_collision(cfg, np.random.default_rng(4))


def test_hard_tokens_and_targets():
    cfg, ep = _hard_episode()
    V = collision_vocab(cfg)
    s = tokenize_collision(ep, cfg, np.random.default_rng(0))
    assert len(s) == 8 * cfg.episode_steps
    steps = np.flatnonzero(s.loss_mask) // 8
    assert np.all(steps % cfg.question_interval == 0)
    by_step = {c.step: c for c in ep.collisions}
    for pos in np.flatnonzero(s.loss_mask):
        st = pos // 8
        q = tuple(int(t) - V.qcolor0 for t in s.input_tokens[st * 8 + 6 : st * 8 + 8])
        last = [c for k, c in sorted(by_step.items()) if k <= st and c.colors == q]
        assert last, "query must be answerable"
        assert s.target_tokens[pos] == V.quadrant0 + last[-1].quadrant


def test_hard_matched_query_rate():
    cfg = CollisionConfig(grid_size=4, episode_steps=400, question_interval=2, color_change_prob=0.1)
    matched = total = 0
    for seed in range(20):
        ep = simulate_collision(cfg, np.random.default_rng(seed))
        s = tokenize_collision(ep, cfg, np.random.default_rng(seed + 100))
        V = collision_vocab(cfg)
        for pos in np.flatnonzero(s.loss_mask):
            st = pos // 8
            hist = [c for c in ep.collisions if c.step <= st]
            q = tuple(int(t) - V.qcolor0 for t in s.input_tokens[st * 8 + 6 : st * 8 + 8])
            matched += q == hist[-1].colors
            total += 1
    # 40% forced matches plus resampled queries that happen to hit the last pair
    assert matched / total >= 0.4 - 0.05


def test_easy_question_types():
    cfg = CollisionConfig(grid_size=4, episode_steps=300, question_interval=3, easy_mode=True, map_question_rate=0.5)
    V = collision_vocab(cfg)
    ep = simulate_collision(cfg, np.random.default_rng(7))
    s = tokenize_collision(ep, cfg, np.random.default_rng(1))
    assert len(s) == 6 * cfg.episode_steps
    kinds = set()
    for pos in np.flatnonzero(s.loss_mask):
        st = pos // 6
        hist = [c for c in ep.collisions if c.step <= st]
        qtype = s.input_tokens[st * 6 + 4]
        kinds.add(int(qtype))
        if qtype == V.q_last:
            assert s.target_tokens[pos] == V.quadrant0 + hist[-1].quadrant
        else:
            assert qtype == V.q_map
            assert V.decode_map(int(s.target_tokens[pos])) == tuple(c.quadrant for c in hist[-3:])
    assert kinds == {V.q_last, V.q_map}


def test_map_token_roundtrip():
    V = collision_vocab(CollisionConfig())
    for q in [(0, 0, 0), (3, 2, 1), (1, 3, 0)]:
        assert V.decode_map(V.map_token(q)) == q


def test_gen_collision_deterministic():
    cfg = CollisionConfig(grid_size=4, episode_steps=64, question_interval=4, easy_mode=True)
    a = gen_collision(cfg, np.random.default_rng(3))
    b = gen_collision(cfg, np.random.default_rng(3))
    assert np.array_equal(a.input_tokens, b.input_tokens) and np.array_equal(a.target_tokens, b.target_tokens)
    assert a.input_tokens.max() < collision_vocab(cfg).size


def test_collision_config_validation():
    with pytest.raises(ConfigError):
        CollisionConfig(grid_size=1).validate()
    with pytest.raises(ConfigError):
        CollisionConfig(matched_query_rate=1.5).validate()


def test_dump_episode(tmp_path):
    cfg = CollisionConfig(grid_size=4, episode_steps=30)
    ep = simulate_collision(cfg, np.random.default_rng(0))
    path = tmp_path / "ep.jsonl"
    dump_episode(ep, path)
    recs = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(recs) == 30 and recs[5]["step"] == 5


# ---------------------------------------------------------------- char LM


def test_char_lm_abab():
    vocab = build_vocab(b"abab")
    blocks = list(char_lm_stream(encode(b"abab", vocab), 2))
    assert [b.input_tokens.tolist() for b in blocks] == [[0, 1], [0, 1]]
    assert blocks[0].target_tokens.tolist() == [1, 0]
    assert blocks[1].target_tokens[0] == 1 and blocks[1].loss_mask.tolist() == [True, False]


def test_char_lm_empty(tmp_path):
    p = tmp_path / "empty.txt"
    p.write_bytes(b"")
    with pytest.raises(ValueError):
        load_char_corpus(p)


def test_char_corpus_split(tmp_path):
    p = tmp_path / "c.txt"
    p.write_bytes(bytes(range(32, 122)) * 20)
    c = load_char_corpus(p)
    n = 90 * 20
    assert (len(c.train), len(c.valid), len(c.test)) == (int(n * 0.9), int(n * 0.95) - int(n * 0.9), n - int(n * 0.95))
    assert c.vocab_size == 90


# ---------------------------------------------------------------- streams


def test_sample_stream_blocks():
    cfg = CopyConfig(distance=3, max_count=2)
    st = SampleStream(lambda r: gen_copy(cfg, r), 2, 5, seed=0)
    blocks = [st.next_block() for _ in range(6)]
    flat = np.concatenate([b.inputs[0] for b in blocks])
    ids = np.concatenate([b.sample_ids[0] for b in blocks])
    # samples are laid back to back and each id covers one whole sample
    for sid in np.unique(ids)[:-1]:
        seg = flat[ids == sid]
        assert seg[-1] == S and (seg == GO).sum() == 1
    assert all(b.inputs.shape == (2, 5) for b in blocks)


def test_token_stream_wraps():
    ts = TokenStream(np.arange(40), 2, 4)
    b = ts.next_block()
    assert b.inputs.tolist() == [[0, 1, 2, 3], [20, 21, 22, 23]]
    assert b.targets.tolist() == [[1, 2, 3, 4], [21, 22, 23, 24]]
    for _ in range(ts.blocks_per_epoch()):
        b = ts.next_block()
    assert b.inputs[0, 0] == 0
