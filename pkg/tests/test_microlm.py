import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as hst

from lesionlm import microlm as lm

from oracles import finite_difference_check

TINY = lm.ModelConfig(vocab_size=32, dim=8, n_layers=1, n_heads=2, mlp_mult=2, context_len=16)


def test_config_validation():
    with pytest.raises(lm.ConfigError):
        lm.ModelConfig(dim=33, n_heads=4)
    with pytest.raises(lm.ConfigError):
        lm.ModelConfig(context_len=0)


def test_layout_rule():
    store = lm.init_model(lm.ModelConfig(dim=32, n_layers=2, vocab_size=256, n_heads=4))
    assert store["layer1.mlp.down"].shape == (32 * 4, 32)
    assert set(store) == set(lm.param_shapes(store.config))
    np.testing.assert_array_equal(store["final_norm"], np.ones(32))


def test_every_tensor_has_one_component():
    for name in lm.param_shapes(lm.ModelConfig(n_layers=3)):
        layer, comp = lm.classify(name)
        assert comp in lm.COMPONENTS


def test_init_is_deterministic():
    a, b = lm.init_model(TINY), lm.init_model(TINY)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_gradient_check():
    worst, n = finite_difference_check(TINY, n_params=600)
    assert n >= 500
    assert worst < 1e-3


def test_forward_shapes_and_single_token():
    store = lm.init_model(TINY)
    h, logits = lm.forward(store, [3])
    assert h.shape == (1, 8) and logits.shape == (1, 32)
    with pytest.raises(ValueError):
        lm.forward(store, np.zeros(17, dtype=int))


@given(hst.integers(0, 10), hst.integers(0, 2**31 - 1))
def test_causality(t, seed):
    store = lm.init_model(TINY)
    rng = np.random.default_rng(seed)
    ctx = rng.integers(0, 32, size=12)
    other = ctx.copy()
    other[t + 1:] = rng.permutation(other[t + 1:])
    other[t + 1:] = (other[t + 1:] + 1) % 32
    h1, _ = lm.forward(store, ctx)
    h2, _ = lm.forward(store, other)
    np.testing.assert_array_equal(h1[:t + 1], h2[:t + 1])


def test_zero_head_gives_zero_logits_and_uniform_perplexity():
    store = lm.init_model(TINY)
    store["head"][:] = 0.0
    _, logits = lm.forward(store, [1, 2, 3])
    assert not logits.any()
    corpus = np.random.default_rng(0).integers(0, 32, size=100)
    assert lm.perplexity(store, corpus) == pytest.approx(32.0, rel=1e-12)


def test_initial_loss_near_log_vocab():
    store = lm.init_model(lm.ModelConfig())
    batch = np.random.default_rng(1).integers(0, 256, size=(8, 65))
    loss, _ = lm.loss_and_grads(store, batch)
    assert abs(loss - math.log(256)) < 0.2


def test_zero_lr_leaves_store_but_accumulates():
    store = lm.init_model(TINY)
    before = store.copy()
    acc = lm.GradAccumulator.zeros_like(store)
    lm.train_step(store, np.random.default_rng(0).integers(0, 32, (2, 9)), 0.0, acc)
    assert all(np.array_equal(store[k], before[k]) for k in store)
    assert acc.step_count == 1
    assert sum(float(v.sum()) for v in acc.sums.values()) > 0


def test_divergence_raises():
    store = lm.init_model(TINY)
    store["head"][0, 0] = np.nan
    with pytest.raises(lm.DivergenceError):
        lm.train_step(store, np.ones((1, 5), dtype=int), 0.1)


def test_learns_a_repeating_sequence():
    cfg = lm.ModelConfig(vocab_size=16, dim=16, n_layers=1, n_heads=2, mlp_mult=2,
                         context_len=32)
    store = lm.init_model(cfg)
    seq = np.tile(np.arange(8), 200)
    before = lm.perplexity(store, seq[:200])
    losses = lm.train(store, seq, 200, 0.5, batch_size=8, seq_len=24, seed=0)
    after = lm.perplexity(store, seq[:200])
    assert losses[-1] < losses[0]
    assert 1.0 <= after < 1.5 < before


def test_perplexity_needs_two_tokens():
    with pytest.raises(ValueError):
        lm.perplexity(lm.init_model(TINY), np.array([1]))


def test_finetune_contract():
    base = lm.init_model(TINY)
    snapshot = base.copy()
    corpus = lm.TimedCorpus(np.random.default_rng(0).integers(0, 32, 300), np.arange(300.0), [0])
    _, zero = lm.finetune_language(base, corpus, 0, 0.1)
    assert all(not v.any() for v in zero.sums.values())
    s1, a1 = lm.finetune_language(base, corpus, 5, 0.1, batch_size=2, seq_len=8, seed=3)
    s2, a2 = lm.finetune_language(base, corpus, 5, 0.1, batch_size=2, seq_len=8, seed=3)
    assert a1.step_count == 5
    assert all(np.array_equal(a1.sums[k], a2.sums[k]) for k in a1.sums)
    assert all(np.array_equal(base[k], snapshot[k]) for k in base)
    assert all((v >= 0).all() for v in a1.sums.values())
    assert any(not np.array_equal(s1[k], base[k]) for k in base)


def test_checkpoint_roundtrip(tmp_path):
    store = lm.init_model(TINY)
    lm.save_model(store, tmp_path / "m")
    back = lm.load_model(tmp_path / "m")
    assert back.config == TINY
    assert all(np.array_equal(back[k], store[k]) for k in store)


def _corpus(n=60, breaks=(0, 5, 9, 30, 41)):
    return lm.TimedCorpus(np.arange(n) % 32, np.arange(n) / 3.0, list(breaks))


def test_embeddings_cardinality_and_first_token():
    store = lm.init_model(TINY)
    c = _corpus()
    emb = lm.extract_embeddings(store, c)
    assert emb.vectors.shape == (60, 8)
    assert emb.context_lengths[0] == 1
    h, _ = lm.forward(store, c.tokens[:1])
    np.testing.assert_allclose(emb.vectors[0], h[0], rtol=0, atol=1e-12)
    np.testing.assert_array_equal(emb.onsets, c.onsets)


def test_context_window_rule():
    c = _corpus()
    starts = lm.context_starts(c, 16)
    # token 12 sits in sentence [9, 30); sentences from 0 fit within 16 tokens
    assert starts[12] == 0
    # token 20: earliest sentence start keeping the window within 16 tokens
    assert starts[20] == 5
    # no complete-sentence window fits: fall back to the last 16 tokens
    assert starts[28] == 28 - 15
    assert (np.arange(60) - starts + 1 <= 16).all()


def test_identical_prefix_identical_embedding():
    store = lm.init_model(TINY)
    short = lm.TimedCorpus([4, 5, 6, 7, 1], np.arange(5.0), [0])
    longer = lm.TimedCorpus([4, 5, 6, 7, 1, 9, 9, 9], np.arange(8.0), [0])
    a = lm.extract_embeddings(store, short).vectors
    b = lm.extract_embeddings(store, longer).vectors
    np.testing.assert_allclose(a, b[:5], rtol=0, atol=1e-12)


def test_corpus_csv_roundtrip(tmp_path):
    c = _corpus()
    lm.write_corpus_csv(c, tmp_path / "c.csv")
    back = lm.read_corpus_csv(tmp_path / "c.csv")
    np.testing.assert_array_equal(back.tokens, c.tokens)
    np.testing.assert_array_equal(back.onsets, c.onsets)
    np.testing.assert_array_equal(back.sentence_breaks, c.sentence_breaks)


def test_corpus_from_text():
    c = lm.corpus_from_text("Hi there. Yes!  No?", tokens_per_second=2.0)
    assert len(c) == len("Hi there. Yes!  No?".encode())
    assert list(c.sentence_breaks) == [0, 9, 14]
    assert c.word_ids[0] == 0 and c.word_ids[3] == 1
    assert c.onsets[4] == 2.0
