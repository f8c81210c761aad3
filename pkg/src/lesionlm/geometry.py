"""Representational geometry and probing on frozen embeddings.

Word pooling, PCA, the silhouette coefficient, and a small
Linear-ReLU-Dropout-Linear probe trained with Adam.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .microlm import TokenEmbeddings


@dataclass
class LabeledEmbeddings:
    vectors: np.ndarray
    labels: np.ndarray
    word_idx: np.ndarray | None = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if len(self.vectors) != len(self.labels):
            raise ValueError("one label per row required")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "LabeledEmbeddings":
        w = None if self.word_idx is None else self.word_idx[idx]
        return LabeledEmbeddings(self.vectors[idx], self.labels[idx], w)


def pool_words(vectors, word_idx):
    """Mean of the token vectors of each word. Returns ``(word_ids, pooled)``
    with ``word_ids`` sorted ascending."""
    if word_idx is None:
        raise ValueError("word indices are required for pooling")
    vectors = np.asarray(vectors, dtype=np.float64)
    word_idx = np.asarray(word_idx)
    if len(word_idx) != len(vectors):
        raise ValueError("word index missing for some tokens")
    ids, inv = np.unique(word_idx, return_inverse=True)
    sums = np.zeros((len(ids), vectors.shape[1]))
    np.add.at(sums, inv, vectors)
    return ids, sums / np.bincount(inv)[:, None]


@dataclass
class PCA:
    mean: np.ndarray
    components: np.ndarray  # (k, d), orthonormal rows
    explained_variance: np.ndarray

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) @ self.components.T

    def inverse_transform(self, Z) -> np.ndarray:
        return np.asarray(Z) @ self.components + self.mean


def pca_fit(X, k: int) -> PCA:
    """Top-``k`` principal axes of mean-centred ``X``. Each axis is signed so
    that its largest-magnitude loading is positive."""
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if not 1 <= k <= min(n, d):
        raise ValueError(f"k={k} must lie in [1, min(n, d)={min(n, d)}]")
    mean = X.mean(axis=0)
    Xc = X - mean
    if not np.any(Xc):
        raise ValueError("X has zero variance")
    _, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    comps = Vt[:k]
    lead = np.argmax(np.abs(comps), axis=1)
    comps = comps * np.sign(comps[np.arange(k), lead])[:, None]
    return PCA(mean, comps, s[:k] ** 2 / max(n - 1, 1))


def pca_project(X, k: int) -> np.ndarray:
    return pca_fit(X, k).transform(X)


def silhouette(X, labels, chunk: int = 256) -> float:
    """Mean silhouette coefficient with Euclidean distance.

    Points alone in their cluster score 0, as do points with ``a = b = 0``.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(labels)
    uniq, lab = np.unique(labels, return_inverse=True)
    if len(uniq) < 2:
        raise ValueError("silhouette needs at least two clusters")
    if n < 3:
        raise ValueError("silhouette needs at least three points")
    sizes = np.bincount(lab, minlength=len(uniq)).astype(np.float64)
    onehot = np.zeros((n, len(uniq)))
    onehot[np.arange(n), lab] = 1.0
    s = np.zeros(n)
    for i in range(0, n, chunk):
        D = cdist(X[i:i + chunk], X)
        sums = D @ onehot  # (chunk, clusters)
        own = lab[i:i + chunk]
        rows = np.arange(len(own))
        own_size = sizes[own]
        a = np.where(own_size > 1, sums[rows, own] / np.maximum(own_size - 1, 1), 0.0)
        other = sums / sizes
        other[rows, own] = np.inf
        b = other.min(axis=1)
        den = np.maximum(a, b)
        val = np.where(den > 0, (b - a) / np.where(den > 0, den, 1.0), 0.0)
        s[i:i + chunk] = np.where(own_size > 1, val, 0.0)
    return float(s.mean())


# ---------------------------------------------------------------------------
# probing


@dataclass
class ProbeConfig:
    hidden: int = 128
    dropout: float = 0.1
    epochs: int = 20
    lr: float = 1e-3
    batch: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.hidden <= 0 or self.epochs < 1 or self.batch < 1:
            raise ValueError("hidden > 0, epochs >= 1 and batch >= 1 required")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")


class MLPProbe:
    """Linear -> ReLU -> Dropout -> Linear with an Adam optimiser."""

    def __init__(self, n_in: int, n_classes: int, cfg: ProbeConfig, rng: np.random.Generator):
        self.cfg = cfg
        b1, b2 = 1 / math.sqrt(n_in), 1 / math.sqrt(cfg.hidden)
        self.params = {
            "W1": rng.uniform(-b1, b1, (n_in, cfg.hidden)),
            "b1": rng.uniform(-b1, b1, cfg.hidden),
            "W2": rng.uniform(-b2, b2, (cfg.hidden, n_classes)),
            "b2": rng.uniform(-b2, b2, n_classes),
        }
        self.m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.t = 0

    def logits(self, X):
        p = self.params
        return np.maximum(X @ p["W1"] + p["b1"], 0.0) @ p["W2"] + p["b2"]

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.logits(X), axis=1)

    def step(self, X, y, rng) -> float:
        p, keep = self.params, 1.0 - self.cfg.dropout
        pre = X @ p["W1"] + p["b1"]
        h = np.maximum(pre, 0.0)
        drop = (rng.random(h.shape) < keep) / keep if self.cfg.dropout > 0 else 1.0
        hd = h * drop
        z = hd @ p["W2"] + p["b2"]
        z = z - z.max(axis=1, keepdims=True)
        prob = np.exp(z)
        prob /= prob.sum(axis=1, keepdims=True)
        n = len(y)
        loss = -np.log(prob[np.arange(n), y] + 1e-300).mean()
        dz = prob
        dz[np.arange(n), y] -= 1.0
        dz /= n
        grads = {"W2": hd.T @ dz, "b2": dz.sum(axis=0)}
        dpre = (dz @ p["W2"].T) * drop * (pre > 0)
        grads["W1"] = X.T @ dpre
        grads["b1"] = dpre.sum(axis=0)
        self.t += 1
        b1c, b2c = 1 - 0.9 ** self.t, 1 - 0.999 ** self.t
        for k, g in grads.items():
            self.m[k] = 0.9 * self.m[k] + 0.1 * g
            self.v[k] = 0.999 * self.v[k] + 0.001 * g * g
            p[k] -= self.cfg.lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + 1e-8)
        return float(loss)

    def snapshot(self):
        return {k: v.copy() for k, v in self.params.items()}


def classification_metrics(y_true, y_pred) -> dict[str, float]:
    """Accuracy and macro precision/recall/F1 over labels seen in either
    vector; undefined ratios count as 0."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    labels = np.unique(np.concatenate([y_true, y_pred]))
    prec, rec, f1 = [], [], []
    for c in labels:
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        prec.append(p)
        rec.append(r)
        f1.append(2 * p * r / (p + r) if p + r else 0.0)
    return {"accuracy": float(np.mean(y_true == y_pred)), "precision": float(np.mean(prec)),
            "recall": float(np.mean(rec)), "f1": float(np.mean(f1))}


def probe_train_eval(train: LabeledEmbeddings, dev: LabeledEmbeddings, test: LabeledEmbeddings,
                     cfg: ProbeConfig = ProbeConfig()) -> dict[str, float]:
    """Train on ``train``, keep the epoch with the best dev accuracy, score ``test``."""
    classes = np.unique(train.labels)
    if len(classes) < 2:
        raise ValueError("probing needs at least two classes in the training split")
    missing = set(np.unique(np.concatenate([dev.labels, test.labels]))) - set(classes)
    if missing:
        raise ValueError(f"classes {sorted(missing)} absent from the training split")
    index = {c: i for i, c in enumerate(classes)}
    enc = lambda y: np.array([index[c] for c in y], dtype=np.int64)
    ytr, ydev, yte = enc(train.labels), enc(dev.labels), enc(test.labels)

    rng = np.random.default_rng(cfg.seed)
    probe = MLPProbe(train.vectors.shape[1], len(classes), cfg, rng)
    best_acc, best = -1.0, probe.snapshot()
    for _ in range(cfg.epochs):
        order = rng.permutation(len(ytr))
        for i in range(0, len(order), cfg.batch):
            idx = order[i:i + cfg.batch]
            probe.step(train.vectors[idx], ytr[idx], rng)
        acc = float(np.mean(probe.predict(dev.vectors) == ydev))
        if acc > best_acc:
            best_acc, best = acc, probe.snapshot()
    probe.params = best
    out = classification_metrics(yte, probe.predict(test.vectors))
    out["dev_accuracy"] = best_acc
    return out


def length_bins(lengths, n_bins: int = 6) -> np.ndarray:
    """Quantile bin of each length; ties never straddle a bin edge."""
    lengths = np.asarray(lengths, dtype=np.float64)
    edges = np.quantile(lengths, np.linspace(0, 1, n_bins + 1)[1:-1])
    return np.searchsorted(np.unique(edges), lengths, side="right")


def sentence_length_task(emb: TokenEmbeddings, n_bins: int = 6,
                         language: str | None = None) -> LabeledEmbeddings:
    """Sentence vectors (mean of token vectors) labelled by token-count bin."""
    if len(emb.vectors) == 0:
        raise ValueError("empty corpus")
    ids, pooled = pool_words(emb.vectors, emb.sentence_ids)
    counts = np.bincount(np.unique(emb.sentence_ids, return_inverse=True)[1])
    return LabeledEmbeddings(pooled, length_bins(counts, n_bins), ids)


def split_indices(n: int, fractions=(0.6, 0.2, 0.2), seed: int = 0):
    """Disjoint train/dev/test index arrays from a seeded permutation."""
    perm = np.random.default_rng(seed).permutation(n)
    a = int(round(fractions[0] * n))
    b = a + int(round(fractions[1] * n))
    return perm[:a], perm[a:b], perm[b:]


def stratified_sample(labels, per_label: int, seed: int = 0) -> np.ndarray:
    """Up to ``per_label`` indices for each label, in ascending order."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    out = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) > per_label:
            idx = np.sort(rng.choice(idx, per_label, replace=False))
        out.append(idx)
    return np.sort(np.concatenate(out))
