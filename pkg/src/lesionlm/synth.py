"""Synthetic languages, timed corpora and planted-ground-truth BOLD data.

Each language is a first-order Markov chain over a shared set of function
tokens plus its own private content vocabulary. Transitions into shared
tokens out of shared tokens come from a common generator (the same for every
language); everything else is drawn per language. Sentences end in a shared
period token whose row of the transition matrix is the sentence-start
distribution.

Also home to the brute-force oracles the test-suite checks against.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg

from .encoding import BoldSeries, EmbeddingSeries, lag_shift, zscore_runs
from .microlm import TimedCorpus

PERIOD = 1


@dataclass
class SynthLanguageSpec:
    id: str
    shared_vocab: list[int]
    private_vocab: list[int]
    # transition generator parameters
    bigram_bias: dict = field(default_factory=lambda: {
        "seed": 0, "common_seed": 12345, "shared_weight": 0.35, "concentration": 0.08})
    sentence_len_dist: dict = field(default_factory=lambda: {"mean": 9.0, "min": 3, "max": 24})
    tokens_per_second: float = 3.0

    def validate(self, vocab_size: int = 256) -> None:
        if len(set(self.private_vocab)) != len(self.private_vocab):
            raise ValueError(f"language {self.id}: repeated private tokens")
        if set(self.private_vocab) & set(self.shared_vocab):
            raise ValueError(f"language {self.id}: private vocab overlaps shared vocab")
        if PERIOD not in self.shared_vocab:
            raise ValueError(f"language {self.id}: shared vocab must contain the period token {PERIOD}")
        toks = list(self.shared_vocab) + list(self.private_vocab)
        if min(toks) < 0 or max(toks) >= vocab_size:
            raise ValueError(f"language {self.id}: token id outside vocabulary")
        d = self.sentence_len_dist
        if not (2 <= d["min"] <= d["max"]) or d["mean"] <= 1:
            raise ValueError(f"language {self.id}: bad sentence length distribution {d}")
        if self.tokens_per_second <= 0:
            raise ValueError("tokens_per_second must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthLanguageSpec":
        return cls(**d)


def check_disjoint(specs: list[SynthLanguageSpec]) -> None:
    for i, a in enumerate(specs):
        for b in specs[i + 1:]:
            if set(a.private_vocab) & set(b.private_vocab):
                raise ValueError(f"private vocabs of {a.id} and {b.id} overlap")


def default_languages(n_shared: int = 24, n_private: int = 48, seed: int = 0) -> list[SynthLanguageSpec]:
    shared = list(range(1, 1 + n_shared))
    specs = []
    base = 32
    for j, lid in enumerate("ABC"):
        private = list(range(base + j * n_private, base + (j + 1) * n_private))
        specs.append(SynthLanguageSpec(
            id=lid, shared_vocab=shared, private_vocab=private,
            bigram_bias={"seed": seed * 100 + j + 1, "common_seed": 12345 + seed,
                         "shared_weight": 0.35, "concentration": 0.08}))
    return specs


def _sparse_dirichlet(rng, n, alpha):
    p = rng.gamma(alpha, size=n)
    if p.sum() == 0:
        p[rng.integers(n)] = 1.0
    return p / p.sum()


def transition_matrix(spec: SynthLanguageSpec, vocab_size: int = 256) -> np.ndarray:
    """Row-stochastic ``(vocab, vocab)`` matrix; rows outside the language are zero.

    The period column is zero: the period is only ever emitted to close a
    sentence, and its own row is the sentence-start distribution.
    """
    spec.validate(vocab_size)
    bb = spec.bigram_bias
    rng = np.random.default_rng(bb["seed"])
    common = np.random.default_rng(bb["common_seed"])
    alpha, w = bb["concentration"], bb["shared_weight"]
    shared = np.array([t for t in spec.shared_vocab if t != PERIOD])
    private = np.array(spec.private_vocab)
    T = np.zeros((vocab_size, vocab_size))
    # common draws first, in fixed order, so they do not depend on the language
    common_rows = {a: _sparse_dirichlet(common, len(shared), 4 * alpha)
                   for a in [PERIOD] + list(shared)}
    for a in [PERIOD] + list(shared) + list(private):
        if a in common_rows:
            to_shared = common_rows[a]
        else:
            to_shared = _sparse_dirichlet(rng, len(shared), 4 * alpha)
        to_private = _sparse_dirichlet(rng, len(private), alpha)
        T[a, shared] = w * to_shared
        T[a, private] = (1 - w) * to_private
    return T


def sentence_lengths(spec: SynthLanguageSpec, n_tokens: int, rng) -> list[int]:
    d = spec.sentence_len_dist
    lengths, total = [], 0
    while total < n_tokens:
        L = int(np.clip(d["min"] + rng.poisson(d["mean"] - d["min"]), d["min"], d["max"]))
        L = min(L, n_tokens - total)
        lengths.append(L)
        total += L
    return lengths


def gen_corpus(spec: SynthLanguageSpec, n_tokens: int, seed: int,
               vocab_size: int = 256) -> TimedCorpus:
    """Sample ``n_tokens`` from the language's chain at a constant token rate."""
    if n_tokens < 1:
        raise ValueError("n_tokens must be >= 1")
    T = transition_matrix(spec, vocab_size)
    cdf = np.cumsum(T, axis=1)
    rng = np.random.default_rng(seed)
    tokens = np.empty(n_tokens, dtype=np.int64)
    breaks = []
    i = 0
    for L in sentence_lengths(spec, n_tokens, rng):
        breaks.append(i)
        prev = PERIOD
        u = rng.random(L)
        for k in range(L):
            if k == L - 1:
                tok = PERIOD
            else:
                tok = int(np.searchsorted(cdf[prev], u[k] * cdf[prev, -1], side="right"))
            tokens[i + k] = tok
            prev = tok
        i += L
    onsets = np.arange(n_tokens) / spec.tokens_per_second
    return TimedCorpus(tokens, onsets, breaks)


def empirical_transitions(corpus: TimedCorpus, vocab_size: int = 256) -> np.ndarray:
    """Counts of sampled transitions, excluding the forced sentence-final period."""
    tok = corpus.tokens
    counts = np.zeros((vocab_size, vocab_size))
    last = np.zeros(len(tok), dtype=bool)
    last[corpus.sentence_breaks[1:] - 1] = True
    last[-1] = True
    # position i -> i+1 within a sentence where i+1 is not the closing period
    nxt_last = np.roll(last, -1)
    keep = ~last[:-1] & ~nxt_last[:-1]
    np.add.at(counts, (tok[:-1][keep], tok[1:][keep]), 1)
    # period -> first token of the next sentence
    starts = corpus.sentence_breaks[1:]
    ok = ~last[starts]
    np.add.at(counts, (np.full(ok.sum(), PERIOD), tok[starts][ok]), 1)
    return counts


# ---------------------------------------------------------------------------
# subjects and BOLD


@dataclass
class SynthSubjectSpec:
    language: str
    n_runs: int = 9
    trs_per_run: int = 60
    n_voxels: int = 40
    snr: float = 1.0
    ground_truth_W: np.ndarray | None = None
    seed: int = 0

    def validate(self) -> None:
        if self.n_runs < 2:
            raise ValueError("n_runs must be >= 2")
        if not self.snr > 0:
            raise ValueError("snr must be > 0")


def planted_weights(dim: int, n_voxels: int, dims, seed: int, scale: float = 1.0) -> np.ndarray:
    """Voxel weights loading only on the embedding dimensions ``dims``."""
    rng = np.random.default_rng(seed)
    W = np.zeros((dim, n_voxels))
    dims = np.asarray(list(dims), dtype=np.int64)
    W[dims] = rng.standard_normal((len(dims), n_voxels)) * scale
    return W


def language_contrast_dims(emb_by_language: dict[str, np.ndarray], target: str, k: int) -> np.ndarray:
    """Dimensions whose held-out mean separates ``target`` from the other
    languages most, in units of the pooled standard deviation."""
    others = [L for L in sorted(emb_by_language) if L != target]
    pooled = np.concatenate([emb_by_language[L] for L in sorted(emb_by_language)]).std(axis=0)
    diff = emb_by_language[target].mean(axis=0) - np.mean(
        [emb_by_language[L].mean(axis=0) for L in others], axis=0)
    score = np.abs(diff) / np.where(pooled > 0, pooled, 1.0)
    return np.sort(np.argsort(-score, kind="stable")[:k])


def _residual_cov(target: np.ndarray, predictor: np.ndarray) -> np.ndarray:
    A = np.column_stack([predictor, np.ones(len(predictor))])
    coef, *_ = np.linalg.lstsq(A, target, rcond=None)
    resid = target - A @ coef
    return resid.T @ resid / len(target)


def lesion_contrast_basis(intact: np.ndarray, lesioned: dict[str, np.ndarray], target: str,
                          k: int, ridge: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
    """Directions of the intact embedding space that the ``target`` lesion
    destroys more than the other lesions do.

    Each lesioned model's embeddings of the same tokens are regressed onto
    the intact ones; the residual covariance measures what that lesion makes
    unrecoverable. Returns the top ``k`` generalized eigenvectors of
    (target residual covariance - mean of the others) against the intact
    covariance, as a ``(dim, k)`` basis with unit intact variance per
    column, and their eigenvalues.
    """
    if target not in lesioned or len(lesioned) < 2:
        raise ValueError("need the target lesion and at least one other")
    resid = {name: _residual_cov(intact, X) for name, X in lesioned.items()}
    contrast = resid[target] - np.mean([resid[n] for n in sorted(resid) if n != target], axis=0)
    cov = np.cov(intact, rowvar=False)
    cov += ridge * max(float(np.trace(cov)) / len(cov), 1.0) * np.eye(len(cov))
    vals, vecs = scipy.linalg.eigh(contrast, cov)
    order = np.argsort(-vals, kind="stable")[:k]
    basis = vecs[:, order]
    # fix the sign so the largest-magnitude entry of each column is positive
    flip = np.sign(basis[np.abs(basis).argmax(axis=0), np.arange(basis.shape[1])])
    return basis * np.where(flip == 0, 1.0, flip), vals[order]


def axis_basis(dim: int, dims) -> np.ndarray:
    """Basis whose columns are the coordinate axes ``dims``."""
    return np.eye(dim)[:, np.asarray(list(dims), dtype=np.int64)]


def gen_bold(subject: SynthSubjectSpec, embeddings: EmbeddingSeries) -> BoldSeries:
    """Lagged features times the planted weights plus white noise at ``snr``
    (ratio of signal to noise standard deviation per voxel), z-scored per run."""
    subject.validate()
    runs = embeddings.runs
    if len(runs) < subject.n_runs or any(len(r) < subject.trs_per_run for r in runs[:subject.n_runs]):
        raise ValueError("embeddings do not cover n_runs x trs_per_run")
    W = subject.ground_truth_W
    if W is None or W.shape != (runs[0].shape[1], subject.n_voxels):
        raise ValueError("ground_truth_W must have shape (embedding dim, n_voxels)")
    k = lag_shift(embeddings.lag_seconds, embeddings.tr_seconds)
    signal = []
    for X in runs[:subject.n_runs]:
        X = X[:subject.trs_per_run]
        S = np.zeros((subject.trs_per_run, subject.n_voxels))
        S[k:] = X[:subject.trs_per_run - k] @ W
        signal.append(S)
    sd = np.concatenate(signal).std(axis=0)
    noise_sd = np.where(sd > 0, sd, 1.0) / subject.snr
    rng = np.random.default_rng(subject.seed)
    runs_out = [S + rng.standard_normal(S.shape) * noise_sd for S in signal]
    z, degenerate = zscore_runs(runs_out)
    return BoldSeries(z, degenerate)


# ---------------------------------------------------------------------------
# oracles


def oracle_ridge(X, Y, lam: float) -> np.ndarray:
    """Dense normal equations with an explicit inverse."""
    X, Y = np.asarray(X, float), np.asarray(Y, float)
    A = X.T @ X + lam * np.eye(X.shape[1])
    if lam == 0 and np.linalg.matrix_rank(A) < A.shape[0]:
        raise np.linalg.LinAlgError("singular normal equations at lambda = 0")
    return np.linalg.inv(A) @ X.T @ Y


def oracle_rank(scores) -> list[int]:
    """1-based ascending ranks; equal scores ranked by index."""
    scores = list(scores)
    order = sorted(range(len(scores)), key=lambda i: (scores[i], i))
    ranks = [0] * len(scores)
    for r, i in enumerate(order, start=1):
        ranks[i] = r
    return ranks


def save_specs(path, languages: list[SynthLanguageSpec]) -> None:
    with open(path, "w") as fh:
        json.dump([s.to_dict() for s in languages], fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_specs(path) -> list[SynthLanguageSpec]:
    with open(path) as fh:
        return [SynthLanguageSpec.from_dict(d) for d in json.load(fh)]
