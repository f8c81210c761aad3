import numpy as np
import pytest

from lesionlm import encoding as enc
from lesionlm import synth


@pytest.fixture(scope="module")
def langs():
    return synth.default_languages()


def test_specs_are_valid_and_disjoint(langs, tmp_path):
    for s in langs:
        s.validate(256)
    synth.check_disjoint(langs)
    bad = synth.SynthLanguageSpec.from_dict({**langs[1].to_dict(),
                                             "private_vocab": langs[0].private_vocab[:3]})
    with pytest.raises(ValueError):
        synth.check_disjoint([langs[0], bad])
    synth.save_specs(tmp_path / "l.json", langs)
    assert synth.load_specs(tmp_path / "l.json") == langs


def test_corpus_determinism_and_vocab(langs):
    a = synth.gen_corpus(langs[0], 2000, seed=4)
    b = synth.gen_corpus(langs[0], 2000, seed=4)
    assert np.array_equal(a.tokens, b.tokens) and np.array_equal(a.sentence_breaks, b.sentence_breaks)
    allowed = {synth.PERIOD} | set(langs[0].shared_vocab) | set(langs[0].private_vocab)
    assert set(a.tokens.tolist()) <= allowed
    np.testing.assert_allclose(np.diff(a.onsets), 1 / langs[0].tokens_per_second)


def test_bigram_convergence(langs):
    spec = langs[1]
    T = synth.transition_matrix(spec)
    c = synth.gen_corpus(spec, 100_000, seed=9)
    counts = synth.empirical_transitions(c)
    emp = counts.sum(axis=1)
    # total variation of the joint transition distribution
    joint_emp = counts / counts.sum()
    joint_true = T * (emp / emp.sum())[:, None]
    assert 0.5 * np.abs(joint_emp - joint_true).sum() < 0.05


def test_shared_rows_identical_across_languages(langs):
    Ts = [synth.transition_matrix(s) for s in langs]
    shared = [synth.PERIOD] + list(langs[0].shared_vocab)
    # shared tokens transition into shared tokens identically up to renormalisation
    for T in Ts[1:]:
        a = Ts[0][np.ix_(shared, shared)]
        b = T[np.ix_(shared, shared)]
        np.testing.assert_allclose(a / a.sum(1, keepdims=True), b / b.sum(1, keepdims=True))


def _series(rng, n_runs=9, trs=60, dim=8):
    return enc.EmbeddingSeries([rng.standard_normal((trs, dim)) for _ in range(n_runs)], 2.0, 4.0)


def test_noiseless_bold_is_recovered():
    rng = np.random.default_rng(0)
    emb = _series(rng)
    W = synth.planted_weights(8, 10, [0, 3, 5], seed=1)
    sub = synth.SynthSubjectSpec("A", 9, 60, 10, np.inf, W, seed=2)
    res = enc.encode_subject(emb, synth.gen_bold(sub, emb))
    assert (res.r_mean > 0.999).all()


def test_null_bold():
    rng = np.random.default_rng(1)
    emb = _series(rng)
    sub = synth.SynthSubjectSpec("A", 9, 60, 50, 1.0, np.zeros((8, 50)), seed=3)
    bold = synth.gen_bold(sub, emb)
    res = enc.encode_subject(emb, bold)
    assert abs(res.r_mean.mean()) < 0.05
    for y in bold.runs:
        np.testing.assert_allclose(y.mean(0), 0, atol=1e-6)
        np.testing.assert_allclose(y.std(0), 1, atol=1e-6)


def test_more_noise_lowers_median_r():
    rng = np.random.default_rng(2)
    emb = _series(rng)
    W = synth.planted_weights(8, 20, range(8), seed=4)
    med = []
    for snr in (1.0, 0.5):
        sub = synth.SynthSubjectSpec("A", 9, 60, 20, snr, W, seed=5)
        med.append(np.median(enc.encode_subject(emb, synth.gen_bold(sub, emb)).r_mean))
    assert med[0] > med[1]


def test_planted_weights_are_recovered():
    rng = np.random.default_rng(3)
    emb = _series(rng)
    W = synth.planted_weights(8, 6, range(8), seed=6)
    bold = synth.gen_bold(synth.SynthSubjectSpec("A", 9, 60, 6, 10.0, W, seed=7), emb)
    X, Y = zip(*(enc.lag_pair(x, y, 4.0, 2.0) for x, y in zip(emb.runs, bold.runs)))
    What = enc.ridge_fit(np.concatenate(X), np.concatenate(Y), 1e-2)
    for v in range(6):
        assert np.corrcoef(What[:, v], W[:, v])[0, 1] > 0.9


def test_gen_bold_errors():
    rng = np.random.default_rng(4)
    emb = _series(rng, n_runs=2)
    with pytest.raises(ValueError):
        synth.gen_bold(synth.SynthSubjectSpec("A", 3, 60, 4, 1.0, np.zeros((8, 4))), emb)
    with pytest.raises(ValueError):
        synth.gen_bold(synth.SynthSubjectSpec("A", 2, 60, 4, 1.0, np.zeros((7, 4))), emb)
    with pytest.raises(ValueError):
        synth.gen_bold(synth.SynthSubjectSpec("A", 2, 60, 4, 0.0, np.zeros((8, 4))), emb)


def test_dimension_selection_hooks():
    rng = np.random.default_rng(5)
    base = rng.standard_normal((300, 6))
    shifted = {"A": base + np.eye(6)[2] * 3, "B": rng.standard_normal((300, 6)),
               "C": rng.standard_normal((300, 6))}
    assert synth.language_contrast_dims(shifted, "A", 1).tolist() == [2]
    np.testing.assert_array_equal(synth.axis_basis(6, [2, 5]), np.eye(6)[:, [2, 5]])


def test_lesion_contrast_basis_finds_target_damage():
    rng = np.random.default_rng(7)
    base = rng.standard_normal((600, 6))
    direction = np.array([1.0, 0, 1, 0, 0, 0]) / np.sqrt(2)
    # target lesion scrambles one oblique direction; the other scrambles axis 5
    target = base - np.outer(base @ direction, direction) + np.outer(
        rng.standard_normal(600), direction)
    other = base.copy()
    other[:, 5] = rng.standard_normal(600)
    basis, score = synth.lesion_contrast_basis(base, {"A": target, "B": other}, "A", 2)
    assert basis.shape == (6, 2) and score[0] > 0.5 > score[1]
    top = basis[:, 0] / np.linalg.norm(basis[:, 0])
    assert abs(top @ direction) > 0.99
    assert np.abs(basis).max(axis=0).tolist() == basis[np.abs(basis).argmax(axis=0),
                                                       [0, 1]].tolist()
    # the contrast is antisymmetric: from B's point of view axis 5 dominates
    basis_b, _ = synth.lesion_contrast_basis(base, {"A": target, "B": other}, "B", 1)
    assert np.argmax(np.abs(basis_b[:, 0])) == 5
    with pytest.raises(ValueError):
        synth.lesion_contrast_basis(base, {"A": target}, "A", 1)


def test_oracles():
    rng = np.random.default_rng(6)
    Q, _ = np.linalg.qr(rng.standard_normal((10, 4)))
    Y = rng.standard_normal((10, 2))
    np.testing.assert_allclose(synth.oracle_ridge(Q, Y, 0.0), Q.T @ Y, atol=1e-12)
    np.testing.assert_allclose(synth.oracle_ridge(np.eye(3), np.ones((3, 1)), 1.0), 0.5)
    with pytest.raises(np.linalg.LinAlgError):
        synth.oracle_ridge(np.ones((4, 2)), np.ones(4), 0.0)
    assert synth.oracle_rank([3, 1, 2]) == [3, 1, 2]
    assert synth.oracle_rank([5, 5, 5]) == [1, 2, 3]
